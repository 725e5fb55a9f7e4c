#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "cqa/neural.hpp"
#include "cqa/rng.hpp"

using namespace cqa;

namespace {

ModelConfig small_cfg(std::uint64_t seed = 7) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 16;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.vit_layers = 1;
  c.tapas_layers = 1;
  c.cross_blocks = 1;
  c.vocab_size = 64;
  c.max_rows = 8;
  c.max_cols = 8;
  c.max_seq_len = 48;
  c.seed = seed;
  return c;
}

Image noise_image(int size, std::uint64_t seed) {
  Image img(size, size);
  Rng rng(seed);
  for (double& v : img.data) v = rng.next_double();
  return img;
}

Matrix random_matrix(int r, int c, std::uint64_t seed, double scale = 1.0) {
  Matrix m(r, c);
  Rng rng(seed);
  for (double& v : m.a) v = rng.normal(0.0, scale);
  return m;
}

DataTable two_row_table(double a = 17.13, double b = 40.14) {
  DataTable t;
  t.col_headers = {"value"};
  t.row_labels = {"alpha", "beta"};
  t.cells = {{a}, {b}};
  return t;
}

NeuralError::Kind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const NeuralError& e) {
    return e.kind;
  }
  FAIL("expected a NeuralError");
  return NeuralError::Kind::ShapeError;
}

// Eight examples, one per operation, over per-example tables and images.
struct OverfitData {
  Vocabulary vocab;
  std::vector<TrainExample> examples;
};

OverfitData build_overfit_data(ModelConfig& cfg) {
  struct Spec {
    std::string question;
    AggregationOp op;
    CellSelection cells;
  };
  std::vector<Spec> specs = {
      {"what is the value of alpha", AggregationOp::NONE, {{1, 1}}},
      {"how many categories are listed", AggregationOp::COUNT, {{1, 1}, {2, 1}}},
      {"total across alpha and beta", AggregationOp::SUM, {{1, 1}, {2, 1}}},
      {"average across alpha and beta", AggregationOp::AVERAGE, {{1, 1}, {2, 1}}},
      {"gap between alpha and beta", AggregationOp::DIFFERENCE, {{1, 1}, {2, 1}}},
      {"ratio of alpha to beta", AggregationOp::RATIO, {{1, 1}, {2, 1}}},
      {"is alpha bigger than beta", AggregationOp::YES, {}},
      {"is beta smaller than alpha", AggregationOp::NO, {}},
  };
  std::vector<DataTable> tables;
  std::vector<LinearizedInput> lins;
  std::vector<std::string> corpus;
  for (size_t i = 0; i < specs.size(); ++i) {
    tables.push_back(two_row_table(5.0 + i, 9.0 + 2.0 * i));
    lins.push_back(linearize(specs[i].question, tables.back(), cfg.max_seq_len));
    for (const LinearizedToken& tk : lins.back().tokens) corpus.push_back(tk.text);
  }
  OverfitData data;
  data.vocab = Vocabulary::build(corpus);
  cfg.vocab_size = data.vocab.size();
  for (size_t i = 0; i < specs.size(); ++i) {
    TrainExample ex;
    ex.image = noise_image(cfg.image_size, 900 + i);
    ex.lin = lins[i];
    ex.ids = ids_from_linearized(ex.lin, data.vocab);
    ex.target = {specs[i].op, specs[i].cells, std::nullopt};
    data.examples.push_back(std::move(ex));
  }
  return data;
}

}  // namespace

TEST_CASE("config invariants are enforced") {
  ModelConfig ok;
  CHECK_NOTHROW(ok.validate());

  ModelConfig bad = ok;
  bad.image_size = 60;  // not a multiple of 16
  CHECK(kind_of([&] { bad.validate(); }) == NeuralError::Kind::ShapeError);

  bad = ok;
  bad.embed_dim = 30;  // not divisible by 4 heads
  CHECK(kind_of([&] { bad.validate(); }) == NeuralError::Kind::ShapeError);

  bad = ok;
  bad.cross_blocks = 0;
  CHECK(kind_of([&] { bad.validate(); }) == NeuralError::Kind::ShapeError);

  CHECK(kind_of([&] { Model m(bad); }) == NeuralError::Kind::ShapeError);
}

TEST_CASE("default model carries four cross blocks and a 17-row visual stream") {
  Model m((ModelConfig()));
  CHECK(m.params().cross.size() == 4);
  CHECK(m.config().visual_len() == 17);  // (64/16)^2 + 1
  Matrix pe = m.patchify(Image(64, 64));
  CHECK(pe.rows == 17);
  CHECK(pe.cols == m.config().embed_dim);
}

TEST_CASE("patchify: zero image reduces to bias plus positional embedding") {
  ModelConfig cfg = small_cfg();
  Model m(cfg);
  const ModelParams& p = m.params();
  Image zero(cfg.image_size, cfg.image_size, Rgb{0, 0, 0});
  Matrix pe = m.patchify(zero);
  REQUIRE(pe.rows == 5);
  REQUIRE(pe.cols == cfg.embed_dim);
  for (int j = 0; j < pe.cols; ++j) {
    CHECK(pe.at(0, j) == doctest::Approx(p.vis_cls.at(0, j) + p.vis_pos.at(0, j)).epsilon(1e-12));
    for (int r = 1; r < pe.rows; ++r)
      CHECK(pe.at(r, j) ==
            doctest::Approx(p.patch_bias.at(0, j) + p.vis_pos.at(r, j)).epsilon(1e-12));
  }
}

TEST_CASE("patchify rejects images of the wrong size") {
  Model m(small_cfg());
  CHECK(kind_of([&] { m.patchify(Image(16, 32)); }) == NeuralError::Kind::ShapeError);
}

TEST_CASE("patchify locality: a change inside one patch moves only that row") {
  ModelConfig cfg = small_cfg();
  Model m(cfg);
  Image a = noise_image(cfg.image_size, 11);
  Image b = a;
  // pixel (x=3, y=20) lives in patch (row 1, col 0) -> patch index 2 -> row 3
  b.at(3, 20, 1) = b.at(3, 20, 1) * 0.5 + 0.25;
  Matrix pa = m.patchify(a), pb = m.patchify(b);
  for (int r = 0; r < pa.rows; ++r) {
    bool same = true;
    for (int j = 0; j < pa.cols; ++j) same = same && pa.at(r, j) == pb.at(r, j);
    if (r == 3)
      CHECK_FALSE(same);
    else
      CHECK(same);
  }
}

TEST_CASE("embed_tokens sums token, position, segment, row and column embeddings") {
  ModelConfig cfg = small_cfg();
  Model m(cfg);
  const ModelParams& p = m.params();
  TokenIds ids;
  ids.token = {1, 5};
  ids.segment = {0, 1};
  ids.row = {0, 2};
  ids.col = {0, 1};
  Matrix e = m.embed_tokens(ids);
  REQUIRE(e.rows == 2);
  for (int j = 0; j < e.cols; ++j) {
    double want0 = p.tok_emb.at(1, j) + p.pos_emb.at(0, j) + p.seg_emb.at(0, j) +
                   p.row_emb.at(0, j) + p.col_emb.at(0, j);
    double want1 = p.tok_emb.at(5, j) + p.pos_emb.at(1, j) + p.seg_emb.at(1, j) +
                   p.row_emb.at(2, j) + p.col_emb.at(1, j);
    CHECK(e.at(0, j) == doctest::Approx(want0).epsilon(1e-12));
    CHECK(e.at(1, j) == doctest::Approx(want1).epsilon(1e-12));
  }
}

TEST_CASE("embed_tokens: identical tokens in two cells differ by the row/col deltas") {
  ModelConfig cfg = small_cfg();
  Model m(cfg);
  m.params().pos_emb.fill(0.0);  // isolate coordinate embeddings
  const ModelParams& p = m.params();
  TokenIds ids;
  ids.token = {7, 7};
  ids.segment = {1, 1};
  ids.row = {1, 2};
  ids.col = {2, 1};
  Matrix e = m.embed_tokens(ids);
  for (int j = 0; j < e.cols; ++j) {
    double want = (p.row_emb.at(1, j) + p.col_emb.at(2, j)) -
                  (p.row_emb.at(2, j) + p.col_emb.at(1, j));
    CHECK(e.at(0, j) - e.at(1, j) == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("embed_tokens rejects out-of-range ids") {
  Model m(small_cfg());
  TokenIds ok{{1}, {0}, {0}, {0}};
  CHECK_NOTHROW(m.embed_tokens(ok));

  auto expect = [&](TokenIds ids, NeuralError::Kind want) {
    CHECK(kind_of([&] { m.embed_tokens(ids); }) == want);
  };
  expect({{9999}, {0}, {0}, {0}}, NeuralError::Kind::IdOutOfRange);
  expect({{-1}, {0}, {0}, {0}}, NeuralError::Kind::IdOutOfRange);
  expect({{1}, {2}, {0}, {0}}, NeuralError::Kind::IdOutOfRange);
  expect({{1}, {0}, {8}, {0}}, NeuralError::Kind::IdOutOfRange);
  expect({{1}, {0}, {0}, {-3}}, NeuralError::Kind::IdOutOfRange);
  expect({{1, 2}, {0}, {0, 0}, {0, 0}}, NeuralError::Kind::ShapeError);
  TokenIds toolong;
  for (int i = 0; i < 49; ++i) {
    toolong.token.push_back(1);
    toolong.segment.push_back(0);
    toolong.row.push_back(0);
    toolong.col.push_back(0);
  }
  expect(toolong, NeuralError::Kind::ShapeError);
}

TEST_CASE("zero-layer encoder stack is the identity") {
  Model m(small_cfg());
  Matrix x = random_matrix(6, 16, 21);
  Matrix y = m.encode(x, {});
  CHECK(y == x);
}

TEST_CASE("attention weights form a distribution over keys") {
  Model m(small_cfg());
  Matrix q = random_matrix(6, 16, 31), kv = random_matrix(5, 16, 32);
  std::vector<Matrix> probs;
  attention_forward(q, kv, m.params().vit[0].attn, 2, nullptr, &probs);
  REQUIRE(probs.size() == 2);
  for (const Matrix& P : probs) {
    REQUIRE(P.rows == 6);
    REQUIRE(P.cols == 5);
    for (int i = 0; i < P.rows; ++i) {
      double sum = 0.0;
      for (int j = 0; j < P.cols; ++j) {
        CHECK(P.at(i, j) >= 0.0);
        sum += P.at(i, j);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("masked keys get zero attention and cannot influence other positions") {
  ModelConfig cfg = small_cfg();
  Model m(cfg);
  Matrix x = random_matrix(6, 16, 41);
  std::vector<bool> mask = {false, false, true, false, false, false};

  std::vector<Matrix> probs;
  attention_forward(x, x, m.params().vit[0].attn, 2, &mask, &probs);
  for (const Matrix& P : probs)
    for (int i = 0; i < P.rows; ++i) CHECK(P.at(i, 2) == 0.0);

  Matrix x2 = x;
  for (int j = 0; j < x2.cols; ++j) x2.at(2, j) *= 2.0;  // only the masked row
  Matrix y1 = m.encode(x, m.params().vit, &mask);
  Matrix y2 = m.encode(x2, m.params().vit, &mask);
  for (int i = 0; i < y1.rows; ++i) {
    if (i == 2) continue;
    for (int j = 0; j < y1.cols; ++j)
      CHECK(y1.at(i, j) == doctest::Approx(y2.at(i, j)).epsilon(1e-14));
  }
}

TEST_CASE("uniform cross-attention averages the other branch") {
  int d = 4;
  AttentionParams p;
  p.wq = Matrix(d, d);
  p.wk = Matrix(d, d);
  p.wv = Matrix(d, d);
  p.wo = Matrix(d, d);
  for (int i = 0; i < d; ++i) {
    p.wv.at(i, i) = 1.0;
    p.wo.at(i, i) = 1.0;
  }
  p.bq = p.bk = p.bv = p.bo = Matrix(1, d);
  Matrix q = random_matrix(3, d, 51), kv = random_matrix(5, d, 52);
  Matrix out = attention_forward(q, kv, p, 1);
  for (int j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int i = 0; i < kv.rows; ++i) mean += kv.at(i, j);
    mean /= kv.rows;
    for (int i = 0; i < out.rows; ++i)
      CHECK(out.at(i, j) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("cross block preserves both branches' shapes") {
  ModelConfig cfg = small_cfg();
  Model m(cfg);
  Matrix vis = random_matrix(5, 16, 61), txt = random_matrix(9, 16, 62);
  auto [v2, t2] = m.apply_cross_block(vis, txt, m.params().cross[0]);
  CHECK(v2.rows == 5);
  CHECK(v2.cols == 16);
  CHECK(t2.rows == 9);
  CHECK(t2.cols == 16);
  // stacking keeps shapes stable
  auto [v3, t3] = m.apply_cross_block(v2, t2, m.params().cross[0]);
  CHECK(v3.rows == 5);
  CHECK(t3.rows == 9);
}

TEST_CASE("layer norm restores unit statistics per row") {
  Tape t;
  Matrix x = random_matrix(5, 16, 71, 3.0);
  Matrix gamma(1, 16, 1.0), beta(1, 16, 0.0);
  Tape::Id y = t.layer_norm(t.leaf(x), t.leaf(gamma), t.leaf(beta));
  const Matrix& Y = t.value(y);
  for (int i = 0; i < Y.rows; ++i) {
    double mu = 0.0;
    for (int j = 0; j < Y.cols; ++j) mu += Y.at(i, j);
    mu /= Y.cols;
    double var = 0.0;
    for (int j = 0; j < Y.cols; ++j) var += (Y.at(i, j) - mu) * (Y.at(i, j) - mu);
    var /= Y.cols;
    CHECK(std::abs(mu) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("forward emits eight op logits, per-token scores and pooled states") {
  ModelConfig cfg = small_cfg();
  OverfitData data = build_overfit_data(cfg);
  Model m(cfg);
  const TrainExample& ex = data.examples[0];
  ModelOutput out = m.forward_ids(ex.image, ex.ids, ex.lin.tokens);

  CHECK(out.op_logits.size() == 8);
  for (double v : out.op_logits) CHECK(std::isfinite(v));
  CHECK(out.token_scores.size() == ex.lin.tokens.size());
  CHECK(out.visual_cls.size() == static_cast<size_t>(cfg.embed_dim));
  CHECK(out.textual_cls.size() == static_cast<size_t>(cfg.embed_dim));

  auto cells = out.cell_scores();
  REQUIRE(cells.size() == 2);  // 2x1 table
  CHECK(cells[0].cell == CellRef{1, 1});
  CHECK(cells[1].cell == CellRef{2, 1});

  ModelOutput again = m.forward_ids(ex.image, ex.ids, ex.lin.tokens);
  CHECK(again.op_logits == out.op_logits);
  CHECK(again.token_scores == out.token_scores);
}

TEST_CASE("with zeroed position embeddings, permuting rows permutes only associations") {
  ModelConfig cfg = small_cfg();
  OverfitData data = build_overfit_data(cfg);
  Model m(cfg);
  m.params().pos_emb.fill(0.0);

  const TrainExample& ex = data.examples[2];  // 2-row table
  ModelOutput base = m.forward_ids(ex.image, ex.ids, ex.lin.tokens);

  // Move row 2's tokens ahead of row 1's, keeping every token's coordinates.
  std::vector<size_t> perm;
  for (size_t i = 0; i < ex.lin.tokens.size(); ++i)
    if (!(ex.lin.tokens[i].segment == 1 && ex.lin.tokens[i].row >= 1)) perm.push_back(i);
  for (int want_row : {2, 1})
    for (size_t i = 0; i < ex.lin.tokens.size(); ++i)
      if (ex.lin.tokens[i].segment == 1 && ex.lin.tokens[i].row == want_row)
        perm.push_back(i);
  REQUIRE(perm.size() == ex.lin.tokens.size());

  TokenIds pids;
  std::vector<LinearizedToken> ptokens;
  for (size_t i : perm) {
    pids.token.push_back(ex.ids.token[i]);
    pids.segment.push_back(ex.ids.segment[i]);
    pids.row.push_back(ex.ids.row[i]);
    pids.col.push_back(ex.ids.col[i]);
    ptokens.push_back(ex.lin.tokens[i]);
  }
  ModelOutput permuted = m.forward_ids(ex.image, pids, ptokens);

  for (int j = 0; j < 8; ++j)
    CHECK(permuted.op_logits[j] == doctest::Approx(base.op_logits[j]).epsilon(1e-9));
  auto c1 = base.cell_scores(), c2 = permuted.cell_scores();
  REQUIRE(c1.size() == c2.size());
  for (size_t i = 0; i < c1.size(); ++i) {
    CHECK(c1[i].cell == c2[i].cell);
    CHECK(c1[i].score == doctest::Approx(c2[i].score).epsilon(1e-9));
  }
}

TEST_CASE("loss: uniform op logits give ln 8; lambda scales the cell term") {
  ModelOutput out;
  out.op_logits.fill(0.25);  // uniform
  SupervisionTarget target{AggregationOp::SUM, {}, std::nullopt};
  CHECK(loss_value(out, target, 1.0) == doctest::Approx(std::log(8.0)).epsilon(1e-12));

  // two single-token cells with known scores
  out.tokens = {
      {"10", 1, 1, 1},
      {"20", 1, 1, 2},
  };
  out.token_scores = {0.3, -0.2};
  target.cells = {{1, 1}};
  auto bce = [](double s, double y) {
    double p = 1.0 / (1.0 + std::exp(-s));
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  };
  double want = std::log(8.0) + 2.0 * (bce(0.3, 1.0) + bce(-0.2, 0.0)) / 2.0;
  CHECK(loss_value(out, target, 2.0) == doctest::Approx(want).epsilon(1e-9));
  CHECK(loss_value(out, target, 0.0) == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("tape loss agrees with the reported loss") {
  ModelConfig cfg = small_cfg();
  OverfitData data = build_overfit_data(cfg);
  Model m(cfg);
  for (const TrainExample& ex : data.examples) {
    double tape_loss = example_loss(m, ex, 1.0);
    ModelOutput out = m.forward_ids(ex.image, ex.ids, ex.lin.tokens);
    CHECK(tape_loss == doctest::Approx(loss_value(out, ex.target, 1.0)).epsilon(1e-9));
  }
}

TEST_CASE("gradient check: full model under 1e-4") {
  ModelConfig cfg = small_cfg(3);
  OverfitData data = build_overfit_data(cfg);
  Model m(cfg);
  GradCheckReport report = grad_check(m, data.examples[4], 1.0, 1e-5, 12, 5);
  INFO("worst tensor: ", report.worst_tensor, " rel err ", report.max_rel_error);
  CHECK(report.coords_checked > 500);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("gradient check: linear layer with quadratic loss under 1e-8") {
  Matrix W = random_matrix(3, 2, 81), b = random_matrix(1, 2, 82);
  Matrix x = random_matrix(4, 3, 83), target = random_matrix(4, 2, 84);

  Matrix gW, gb;
  {
    Tape t;
    Tape::Id wi = t.leaf(W), bi = t.leaf(b);
    Tape::Id loss = t.mse_loss(t.add_row_broadcast(t.matmul(t.leaf(x), wi), bi), target);
    t.backward(loss);
    gW = t.grad(wi);
    gb = t.grad(bi);
  }
  auto loss_fn = [&]() {
    Tape t;
    Tape::Id loss =
        t.mse_loss(t.add_row_broadcast(t.matmul(t.leaf(x), t.leaf(W)), t.leaf(b)), target);
    return t.value(loss).at(0, 0);
  };
  GradCheckReport report = grad_check_tensors(
      {{"w", &W, &gW}, {"b", &b, &gb}}, loss_fn, 1e-5, 200, 1);
  CHECK(report.coords_checked == 8);
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("gradient check flags non-finite gradients") {
  ModelConfig cfg = small_cfg();
  OverfitData data = build_overfit_data(cfg);
  Model m(cfg);
  m.params().cell_head.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK(kind_of([&] { grad_check(m, data.examples[0], 1.0, 1e-5, 4, 1); }) ==
        NeuralError::Kind::NonFiniteGradient);
}

TEST_CASE("training with zero learning rate leaves parameters untouched") {
  ModelConfig cfg = small_cfg();
  OverfitData data = build_overfit_data(cfg);
  Model m(cfg);
  std::vector<double> before;
  m.params().for_each_tensor([&before](const std::string&, const Matrix& mm) {
    before.insert(before.end(), mm.a.begin(), mm.a.end());
  });
  TrainOptions opts;
  opts.epochs = 2;
  opts.lr = 0.0;
  opts.batch_size = 4;
  TrainResult res = train(m, data.examples, data.examples, opts);
  std::vector<double> after;
  m.params().for_each_tensor([&after](const std::string&, const Matrix& mm) {
    after.insert(after.end(), mm.a.begin(), mm.a.end());
  });
  CHECK(before == after);
  REQUIRE(res.curve.size() == 4);  // train+val per epoch
  CHECK(res.curve[0].split == "train");
  CHECK(res.curve[1].split == "val");
  CHECK(res.curve[2].epoch == 1);
}

TEST_CASE("training is deterministic for a fixed seed") {
  ModelConfig cfg = small_cfg(19);
  OverfitData data = build_overfit_data(cfg);
  TrainOptions opts;
  opts.epochs = 3;
  opts.lr = 1e-3;
  opts.batch_size = 3;
  opts.shuffle_seed = 5;

  Model m1(cfg), m2(cfg);
  TrainResult r1 = train(m1, data.examples, data.examples, opts);
  TrainResult r2 = train(m2, data.examples, data.examples, opts);
  REQUIRE(r1.curve.size() == r2.curve.size());
  for (size_t i = 0; i < r1.curve.size(); ++i) {
    CHECK(r1.curve[i].loss == r2.curve[i].loss);
    CHECK(r1.curve[i].op_acc == r2.curve[i].op_acc);
  }
  bool params_equal = true;
  std::vector<const Matrix*> t1, t2;
  m1.params().for_each_tensor([&t1](const std::string&, const Matrix& mm) { t1.push_back(&mm); });
  m2.params().for_each_tensor([&t2](const std::string&, const Matrix& mm) { t2.push_back(&mm); });
  for (size_t i = 0; i < t1.size(); ++i) params_equal = params_equal && (*t1[i] == *t2[i]);
  CHECK(params_equal);
}

TEST_CASE("non-finite loss raises DivergedLoss") {
  ModelConfig cfg = small_cfg();
  OverfitData data = build_overfit_data(cfg);
  Model m(cfg);
  m.params().op_head.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainOptions opts;
  opts.epochs = 1;
  CHECK(kind_of([&] { train(m, data.examples, {}, opts); }) ==
        NeuralError::Kind::DivergedLoss);
}

TEST_CASE("a single batch of eight examples is overfit within 500 steps") {
  ModelConfig cfg = small_cfg(23);
  OverfitData data = build_overfit_data(cfg);
  Model m(cfg);
  TrainOptions opts;
  opts.epochs = 500;  // one step per epoch at batch_size 8
  opts.batch_size = 8;
  opts.lr = 3e-3;
  opts.stop_after_epoch = [](int, double val_loss, double) { return val_loss < 0.09; };
  TrainResult res = train(m, data.examples, data.examples, opts);
  REQUIRE(!res.curve.empty());
  double final_val = res.curve.back().loss;
  INFO("epochs run: ", res.epochs_run, " final val loss: ", final_val);
  CHECK(res.epochs_run <= 500);
  CHECK(final_val < 0.1);
  CHECK(res.curve.back().op_acc == 1.0);
}

TEST_CASE("loss curve serializes as epoch,split,loss,op_acc") {
  std::vector<CurvePoint> curve = {{0, "train", 1.5, 0.25}, {0, "val", 2.0, 0.5}};
  CHECK(curve_to_csv(curve) == "epoch,split,loss,op_acc\n0,train,1.5,0.25\n0,val,2,0.5\n");
}

TEST_CASE("predict_answer decodes ops, thresholds and top-2 selections") {
  DataTable table;
  table.col_headers = {"c1", "c2"};
  table.row_labels = {"r1", "r2"};
  table.cells = {{10.0, 20.0}, {30.0, 40.0}};

  ModelOutput out;
  out.tokens = {
      {"10", 1, 1, 1}, {"20", 1, 1, 2}, {"30", 1, 2, 1}, {"40", 1, 2, 2},
      {"r1", 1, 1, 0},  // label token: never part of cell scores
  };

  SUBCASE("NONE echoes the single selected cell") {
    out.op_logits = {5, 0, 0, 0, 0, 0, 0, 0};
    out.token_scores = {2.0, -1.0, -1.0, -1.0, 9.0};
    Answer a = predict_answer(out, table);
    CHECK(a == Answer::text_of("10"));
  }
  SUBCASE("op ties resolve to the lowest index") {
    out.op_logits = {1, 1, 1, 1, 1, 1, 1, 1};
    out.token_scores = {2.0, -1.0, -1.0, -1.0, 0.0};
    CHECK(predict_answer(out, table) == Answer::text_of("10"));  // NONE
  }
  SUBCASE("SUM takes every cell above threshold") {
    out.op_logits = {0, 0, 3, 0, 0, 0, 0, 0};
    out.token_scores = {1.0, 0.5, -2.0, 0.25, 0.0};
    CHECK(predict_answer(out, table) == Answer::number_of(10.0 + 20.0 + 40.0));
  }
  SUBCASE("DIFFERENCE takes exactly the top two scores") {
    out.op_logits = {0, 0, 0, 0, 4, 0, 0, 0};
    out.token_scores = {-3.0, 0.4, -0.1, 0.2, 0.0};  // top-2: (1,2) and (2,2)
    CHECK(predict_answer(out, table) == Answer::number_of(std::abs(20.0 - 40.0)));
  }
  SUBCASE("RATIO orients its top two row-major") {
    out.op_logits = {0, 0, 0, 0, 0, 6, 0, 0};
    out.token_scores = {0.1, -3.0, 0.9, -3.0, 0.0};  // top-2: (2,1) then (1,1)
    CHECK(predict_answer(out, table) == Answer::number_of(10.0 / 30.0));
  }
  SUBCASE("YES and NO bypass cell selection") {
    out.op_logits = {0, 0, 0, 0, 0, 0, 2, 0};
    out.token_scores = {-1, -1, -1, -1, -1};
    CHECK(predict_answer(out, table) == Answer::class_of(true));
    out.op_logits = {0, 0, 0, 0, 0, 0, 0, 2};
    CHECK(predict_answer(out, table) == Answer::class_of(false));
  }
  SUBCASE("uniform logit shifts do not change the decision") {
    out.op_logits = {0, 0, 3, 0, 0, 0, 0, 0};
    out.token_scores = {1.0, 0.5, -2.0, 0.25, 0.0};
    Answer base = predict_answer(out, table);
    for (double& v : out.op_logits) v += 7.25;
    CHECK(predict_answer(out, table) == base);
  }
  SUBCASE("execution failures surface as ExecutionError with context") {
    out.op_logits = {4, 0, 0, 0, 0, 0, 0, 0};
    out.token_scores = {-1, -1, -1, -1, -1};  // nothing selected
    try {
      predict_answer(out, table);
      FAIL("expected ExecutionError");
    } catch (const NeuralError& e) {
      CHECK(e.kind == NeuralError::Kind::ExecutionError);
      CHECK(std::string(e.what()).find("none") != std::string::npos);
    }
  }
  SUBCASE("DIFFERENCE needs two scored cells") {
    ModelOutput tiny;
    tiny.op_logits = {0, 0, 0, 0, 4, 0, 0, 0};
    tiny.tokens = {{"10", 1, 1, 1}};
    tiny.token_scores = {1.0};
    CHECK(kind_of([&] { predict_answer(tiny, table); }) ==
          NeuralError::Kind::ExecutionError);
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  ModelConfig cfg = small_cfg(29);
  OverfitData data = build_overfit_data(cfg);
  Model m(cfg);
  std::string path = (std::filesystem::temp_directory_path() / "cqa_test.ckpt").string();
  save_checkpoint(path, m, data.vocab);

  {
    std::ifstream in(path, std::ios::binary);
    char magic[4];
    in.read(magic, 4);
    CHECK(std::string(magic, 4) == "CQAT");
  }

  LoadedCheckpoint loaded = load_checkpoint(path);
  CHECK(loaded.model.config() == cfg);
  CHECK(loaded.vocab == data.vocab);
  std::vector<const Matrix*> t1, t2;
  m.params().for_each_tensor([&t1](const std::string&, const Matrix& mm) { t1.push_back(&mm); });
  loaded.model.params().for_each_tensor(
      [&t2](const std::string&, const Matrix& mm) { t2.push_back(&mm); });
  REQUIRE(t1.size() == t2.size());
  for (size_t i = 0; i < t1.size(); ++i) CHECK(*t1[i] == *t2[i]);

  const TrainExample& ex = data.examples[1];
  ModelOutput a = m.forward_ids(ex.image, ex.ids, ex.lin.tokens);
  ModelOutput b = loaded.model.forward_ids(ex.image, ex.ids, ex.lin.tokens);
  CHECK(a.op_logits == b.op_logits);
  CHECK(a.token_scores == b.token_scores);
  std::remove(path.c_str());
}

TEST_CASE("corrupt checkpoints are rejected") {
  std::string path = (std::filesystem::temp_directory_path() / "cqa_bad.ckpt").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE this is not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

  ModelConfig cfg = small_cfg();
  OverfitData data = build_overfit_data(cfg);
  Model m(cfg);
  save_checkpoint(path, m, data.vocab);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("ppm images round-trip") {
  Image img(8, 6);
  Rng rng(99);
  for (double& v : img.data) v = std::round(rng.next_double() * 255.0) / 255.0;
  std::string path = (std::filesystem::temp_directory_path() / "cqa_test.ppm").string();
  write_ppm(path, img);
  Image back = read_ppm(path);
  REQUIRE(back.width == 8);
  REQUIRE(back.height == 6);
  for (size_t i = 0; i < img.data.size(); ++i)
    CHECK(back.data[i] == doctest::Approx(img.data[i]).epsilon(1e-12));
  std::remove(path.c_str());
}
