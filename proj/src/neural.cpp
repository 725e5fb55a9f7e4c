#include "cqa/neural.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "cqa/rng.hpp"

namespace cqa {

namespace {

[[noreturn]] void shape_error(const std::string& msg) {
  throw NeuralError(NeuralError::Kind::ShapeError, msg);
}
[[noreturn]] void id_error(const std::string& msg) {
  throw NeuralError(NeuralError::Kind::IdOutOfRange, msg);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Stable single-term binary cross entropy with logits.
double bce_term(double s, double y) {
  return std::max(s, 0.0) - s * y + std::log1p(std::exp(-std::abs(s)));
}

}  // namespace

void ModelConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
    shape_error("image_size must be a positive multiple of patch_size");
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
    shape_error("embed_dim must be a positive multiple of num_heads");
  if (cross_blocks < 1) shape_error("cross_blocks must be >= 1");
  if (vit_layers < 0 || tapas_layers < 0) shape_error("layer counts must be >= 0");
  if (vocab_size < 4) shape_error("vocab_size must cover the special tokens");
  if (max_rows < 1 || max_cols < 1 || max_seq_len < 1)
    shape_error("embedding table sizes must be positive");
  if (num_ops != kNumOps) shape_error("num_ops must match the operation set");
}

std::string config_to_json(const ModelConfig& c) {
  nlohmann::json j{{"image_size", c.image_size},   {"patch_size", c.patch_size},
                   {"embed_dim", c.embed_dim},     {"num_heads", c.num_heads},
                   {"vit_layers", c.vit_layers},   {"tapas_layers", c.tapas_layers},
                   {"cross_blocks", c.cross_blocks}, {"vocab_size", c.vocab_size},
                   {"max_rows", c.max_rows},       {"max_cols", c.max_cols},
                   {"max_seq_len", c.max_seq_len}, {"num_ops", c.num_ops},
                   {"seed", c.seed}};
  return j.dump();
}

ModelConfig config_from_json(const std::string& raw) {
  nlohmann::json j = nlohmann::json::parse(raw);
  ModelConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.vit_layers = j.at("vit_layers").get<int>();
  c.tapas_layers = j.at("tapas_layers").get<int>();
  c.cross_blocks = j.at("cross_blocks").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_rows = j.at("max_rows").get<int>();
  c.max_cols = j.at("max_cols").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.num_ops = j.at("num_ops").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

namespace {

ModelParams allocate_params(const ModelConfig& c) {
  int d = c.embed_dim, f = c.ffn_dim();
  ModelParams p;
  p.patch_proj = Matrix(c.patch_size * c.patch_size * 3, d);
  p.patch_bias = Matrix(1, d);
  p.vis_cls = Matrix(1, d);
  p.vis_pos = Matrix(c.visual_len(), d);
  p.tok_emb = Matrix(c.vocab_size, d);
  p.pos_emb = Matrix(c.max_seq_len, d);
  p.seg_emb = Matrix(2, d);
  p.row_emb = Matrix(c.max_rows, d);
  p.col_emb = Matrix(c.max_cols, d);
  auto ln = [d]() { return LayerNormParams{Matrix(1, d), Matrix(1, d)}; };
  auto attn = [d]() {
    return AttentionParams{Matrix(d, d), Matrix(1, d), Matrix(d, d), Matrix(1, d),
                           Matrix(d, d), Matrix(1, d), Matrix(d, d), Matrix(1, d)};
  };
  auto ffn = [d, f]() {
    return FfnParams{Matrix(d, f), Matrix(1, f), Matrix(f, d), Matrix(1, d)};
  };
  auto enc = [&]() { return EncoderLayerParams{ln(), attn(), ln(), ffn()}; };
  auto branch = [&]() {
    return CrossBranchParams{ln(), ln(), attn(), ln(), attn(), ln(), ffn()};
  };
  for (int i = 0; i < c.vit_layers; ++i) p.vit.push_back(enc());
  for (int i = 0; i < c.tapas_layers; ++i) p.tapas.push_back(enc());
  for (int i = 0; i < c.cross_blocks; ++i)
    p.cross.push_back(CrossBlockParams{branch(), branch()});
  p.ln_final_vis = ln();
  p.ln_final_txt = ln();
  p.op_head = Matrix(d, c.num_ops);
  p.cell_head = Matrix(d, 1);
  return p;
}

std::string last_component(const std::string& name) {
  size_t dot = name.rfind('.');
  return dot == std::string::npos ? name : name.substr(dot + 1);
}

void init_params(ModelParams& p, std::uint64_t seed) {
  Rng rng = Rng(seed).split(0x6e657572);  // independent stream for weights
  p.for_each_tensor([&rng](const std::string& name, Matrix& m) {
    std::string leafname = last_component(name);
    if (leafname == "gamma") {
      m.fill(1.0);
    } else if (leafname == "patch_bias" || leafname[0] == 'b') {
      m.fill(0.0);
    } else {
      for (double& x : m.a) x = rng.normal(0.0, 0.02);
    }
  });
}

}  // namespace

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  z.for_each_tensor([](const std::string&, Matrix& m) { m.fill(0.0); });
  return z;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  params_ = allocate_params(cfg_);
  init_params(params_, cfg_.seed);
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

// Builds the model's computation graph on a tape. When `grads` is non-null,
// leaves created for parameters are recorded so backward() results can be
// accumulated into the matching gradient slots.
struct ModelGraph {
  Tape t;
  const ModelConfig& cfg;
  const ModelParams& p;
  std::unordered_map<const Matrix*, Matrix*> grad_slot;
  std::vector<std::pair<Tape::Id, Matrix*>> bound;

  ModelGraph(const ModelConfig& c, const ModelParams& params, ModelParams* grads)
      : cfg(c), p(params) {
    if (grads) {
      std::vector<const Matrix*> vals;
      std::vector<Matrix*> slots;
      p.for_each_tensor([&vals](const std::string&, const Matrix& m) { vals.push_back(&m); });
      grads->for_each_tensor([&slots](const std::string&, Matrix& m) { slots.push_back(&m); });
      for (size_t i = 0; i < vals.size(); ++i) grad_slot[vals[i]] = slots[i];
    }
  }

  Tape::Id P(const Matrix& m) {
    Tape::Id id = t.leaf(m);
    auto it = grad_slot.find(&m);
    if (it != grad_slot.end()) bound.emplace_back(id, it->second);
    return id;
  }

  void accumulate_grads() {
    for (auto& [id, slot] : bound) add_into(*slot, t.grad(id));
  }

  Tape::Id layer_norm(Tape::Id x, const LayerNormParams& ln) {
    return t.layer_norm(x, P(ln.gamma), P(ln.beta));
  }

  Tape::Id attention(Tape::Id q_in, Tape::Id kv_in, const AttentionParams& a,
                     const Matrix* mask_bias = nullptr,
                     std::vector<Tape::Id>* probs_out = nullptr) {
    int dh = cfg.head_dim();
    Tape::Id Q = t.add_row_broadcast(t.matmul(q_in, P(a.wq)), P(a.bq));
    Tape::Id K = t.add_row_broadcast(t.matmul(kv_in, P(a.wk)), P(a.bk));
    Tape::Id V = t.add_row_broadcast(t.matmul(kv_in, P(a.wv)), P(a.bv));
    std::vector<Tape::Id> heads;
    for (int h = 0; h < cfg.num_heads; ++h) {
      Tape::Id Qh = t.slice_cols(Q, h * dh, dh);
      Tape::Id Kh = t.slice_cols(K, h * dh, dh);
      Tape::Id Vh = t.slice_cols(V, h * dh, dh);
      Tape::Id S = t.scale(t.matmul_nt(Qh, Kh), 1.0 / std::sqrt(double(dh)));
      if (mask_bias) S = t.add_const(S, *mask_bias);
      Tape::Id A = t.softmax_rows(S);
      if (probs_out) probs_out->push_back(A);
      heads.push_back(t.matmul(A, Vh));
    }
    Tape::Id O = cfg.num_heads == 1 ? heads[0] : t.concat_cols(heads);
    return t.add_row_broadcast(t.matmul(O, P(a.wo)), P(a.bo));
  }

  Tape::Id ffn(Tape::Id x, const FfnParams& f) {
    Tape::Id h = t.gelu(t.add_row_broadcast(t.matmul(x, P(f.w1)), P(f.b1)));
    return t.add_row_broadcast(t.matmul(h, P(f.w2)), P(f.b2));
  }

  Tape::Id encoder_layer(Tape::Id x, const EncoderLayerParams& l,
                         const Matrix* mask_bias) {
    Tape::Id n1 = layer_norm(x, l.ln_attn);
    x = t.add(x, attention(n1, n1, l.attn, mask_bias));
    x = t.add(x, ffn(layer_norm(x, l.ln_ffn), l.ffn));
    return x;
  }

  Tape::Id encoder_stack(Tape::Id x, const std::vector<EncoderLayerParams>& layers,
                         const Matrix* mask_bias) {
    for (const EncoderLayerParams& l : layers) x = encoder_layer(x, l, mask_bias);
    return x;
  }

  // One branch of a cross block: cross-attend to the other branch's
  // pre-block state, self-attend, feed forward; pre-norm residuals.
  Tape::Id cross_branch(Tape::Id x, Tape::Id other_pre, const CrossBranchParams& b) {
    Tape::Id q = layer_norm(x, b.ln_q);
    Tape::Id kv = layer_norm(other_pre, b.ln_kv);
    x = t.add(x, attention(q, kv, b.cross));
    Tape::Id s = layer_norm(x, b.ln_self);
    x = t.add(x, attention(s, s, b.self_attn));
    x = t.add(x, ffn(layer_norm(x, b.ln_ffn), b.ffn));
    return x;
  }

  Tape::Id patch_embed(const Image& img) {
    if (img.width != cfg.image_size || img.height != cfg.image_size)
      shape_error("image must be " + std::to_string(cfg.image_size) + "x" +
                  std::to_string(cfg.image_size));
    int P_ = cfg.patch_size, side = cfg.patches_per_side();
    Matrix patches(cfg.num_patches(), P_ * P_ * 3);
    for (int pr = 0; pr < side; ++pr)
      for (int pc = 0; pc < side; ++pc) {
        int row = pr * side + pc, k = 0;
        for (int y = 0; y < P_; ++y)
          for (int x = 0; x < P_; ++x)
            for (int c = 0; c < 3; ++c)
              patches.at(row, k++) = img.at(pc * P_ + x, pr * P_ + y, c);
      }
    Tape::Id proj = t.add_row_broadcast(t.matmul(t.leaf(std::move(patches)), P(p.patch_proj)),
                                        P(p.patch_bias));
    Tape::Id full = t.concat_rows({P(p.vis_cls), proj});
    return t.add(full, P(p.vis_pos));
  }

  Tape::Id token_embed(const TokenIds& ids) {
    size_t n = ids.token.size();
    if (n == 0) shape_error("token stream is empty");
    if (ids.segment.size() != n || ids.row.size() != n || ids.col.size() != n)
      shape_error("token id streams must have equal length");
    if (static_cast<int>(n) > cfg.max_seq_len)
      shape_error("sequence longer than max_seq_len");
    for (size_t i = 0; i < n; ++i) {
      if (ids.token[i] < 0 || ids.token[i] >= cfg.vocab_size)
        id_error("token id out of range at position " + std::to_string(i));
      if (ids.segment[i] < 0 || ids.segment[i] > 1)
        id_error("segment id out of range at position " + std::to_string(i));
      if (ids.row[i] < 0 || ids.row[i] >= cfg.max_rows)
        id_error("row id out of range at position " + std::to_string(i));
      if (ids.col[i] < 0 || ids.col[i] >= cfg.max_cols)
        id_error("column id out of range at position " + std::to_string(i));
    }
    std::vector<int> positions(n);
    std::iota(positions.begin(), positions.end(), 0);
    Tape::Id e = t.gather_rows(P(p.tok_emb), ids.token);
    e = t.add(e, t.gather_rows(P(p.pos_emb), positions));
    e = t.add(e, t.gather_rows(P(p.seg_emb), ids.segment));
    e = t.add(e, t.gather_rows(P(p.row_emb), ids.row));
    e = t.add(e, t.gather_rows(P(p.col_emb), ids.col));
    return e;
  }

  struct ForwardNodes {
    Tape::Id op_logits, token_scores, vis_cls, txt_cls;
  };

  ForwardNodes forward(const Image& img, const TokenIds& ids) {
    Tape::Id z = encoder_stack(patch_embed(img), p.vit, nullptr);
    Tape::Id h = encoder_stack(token_embed(ids), p.tapas, nullptr);
    for (const CrossBlockParams& block : p.cross) {
      Tape::Id z_next = cross_branch(z, h, block.visual);
      Tape::Id h_next = cross_branch(h, z, block.textual);
      z = z_next;
      h = h_next;
    }
    z = layer_norm(z, p.ln_final_vis);
    h = layer_norm(h, p.ln_final_txt);
    Tape::Id h_cls = t.slice_rows(h, 0, 1);
    return ForwardNodes{
        t.matmul(h_cls, P(p.op_head)),
        t.matmul(h, P(p.cell_head)),
        t.slice_rows(z, 0, 1),
        h_cls,
    };
  }
};

namespace {

Matrix mask_bias_matrix(int lq, int lk, const std::vector<bool>& mask) {
  if (static_cast<int>(mask.size()) != lk)
    shape_error("key padding mask length must match key count");
  Matrix bias(lq, lk);
  for (int j = 0; j < lk; ++j)
    if (mask[j])
      for (int i = 0; i < lq; ++i) bias.at(i, j) = -1e30;
  return bias;
}

// Per-cell mean-aggregation over token scores. Returns the constant matrix
// (cells x tokens) and the cells covered, in row-major order.
std::pair<Matrix, std::vector<CellRef>> cell_aggregation(
    const std::vector<LinearizedToken>& tokens) {
  std::map<CellRef, std::vector<int>> groups;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const LinearizedToken& tk = tokens[i];
    if (tk.segment == 1 && tk.row >= 1 && tk.col >= 1)
      groups[CellRef{tk.row, tk.col}].push_back(static_cast<int>(i));
  }
  Matrix M(static_cast<int>(groups.size()), static_cast<int>(tokens.size()));
  std::vector<CellRef> cells;
  int r = 0;
  for (auto& [cell, idxs] : groups) {
    for (int i : idxs) M.at(r, i) = 1.0 / static_cast<double>(idxs.size());
    cells.push_back(cell);
    ++r;
  }
  return {std::move(M), std::move(cells)};
}

ModelOutput extract_output(ModelGraph& g, const ModelGraph::ForwardNodes& f,
                           const std::vector<LinearizedToken>& tokens) {
  ModelOutput out;
  const Matrix& logits = g.t.value(f.op_logits);
  for (int j = 0; j < logits.cols && j < kNumOps; ++j)
    out.op_logits[static_cast<size_t>(j)] = logits.at(0, j);
  const Matrix& scores = g.t.value(f.token_scores);
  out.token_scores.resize(scores.rows);
  for (int i = 0; i < scores.rows; ++i) out.token_scores[i] = scores.at(i, 0);
  out.tokens = tokens;
  const Matrix& vc = g.t.value(f.vis_cls);
  const Matrix& tc = g.t.value(f.txt_cls);
  out.visual_cls.assign(vc.a.begin(), vc.a.end());
  out.textual_cls.assign(tc.a.begin(), tc.a.end());
  return out;
}

}  // namespace

std::vector<CellScore> ModelOutput::cell_scores() const {
  std::map<CellRef, std::pair<double, int>> acc;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const LinearizedToken& tk = tokens[i];
    if (tk.segment == 1 && tk.row >= 1 && tk.col >= 1) {
      auto& [sum, n] = acc[CellRef{tk.row, tk.col}];
      sum += token_scores[i];
      ++n;
    }
  }
  std::vector<CellScore> out;
  out.reserve(acc.size());
  for (auto& [cell, sn] : acc) out.push_back({cell, sn.first / sn.second});
  return out;
}

TokenIds ids_from_linearized(const LinearizedInput& lin, const Vocabulary& vocab) {
  TokenIds ids;
  ids.token.reserve(lin.tokens.size());
  for (const LinearizedToken& tk : lin.tokens) {
    ids.token.push_back(vocab.id_of(tk.text));
    ids.segment.push_back(tk.segment);
    ids.row.push_back(tk.row);
    ids.col.push_back(tk.col);
  }
  return ids;
}

Matrix Model::patchify(const Image& img) const {
  ModelGraph g(cfg_, params_, nullptr);
  return g.t.value(g.patch_embed(img));
}

Matrix Model::embed_tokens(const TokenIds& ids) const {
  ModelGraph g(cfg_, params_, nullptr);
  return g.t.value(g.token_embed(ids));
}

Matrix Model::encode(const Matrix& input, const std::vector<EncoderLayerParams>& layers,
                     const std::vector<bool>* key_padding_mask) const {
  if (input.cols != cfg_.embed_dim) shape_error("encode expects d-dim rows");
  ModelGraph g(cfg_, params_, nullptr);
  Matrix bias;
  const Matrix* bias_ptr = nullptr;
  if (key_padding_mask) {
    bias = mask_bias_matrix(input.rows, input.rows, *key_padding_mask);
    bias_ptr = &bias;
  }
  return g.t.value(g.encoder_stack(g.t.leaf(input), layers, bias_ptr));
}

std::pair<Matrix, Matrix> Model::apply_cross_block(const Matrix& vis, const Matrix& txt,
                                                   const CrossBlockParams& block) const {
  if (vis.cols != cfg_.embed_dim || txt.cols != cfg_.embed_dim)
    shape_error("cross block expects d-dim rows");
  ModelGraph g(cfg_, params_, nullptr);
  Tape::Id z = g.t.leaf(vis), h = g.t.leaf(txt);
  Tape::Id z_next = g.cross_branch(z, h, block.visual);
  Tape::Id h_next = g.cross_branch(h, z, block.textual);
  return {g.t.value(z_next), g.t.value(h_next)};
}

ModelOutput Model::forward(const Image& img, const LinearizedInput& lin,
                           const Vocabulary& vocab) const {
  return forward_ids(img, ids_from_linearized(lin, vocab), lin.tokens);
}

ModelOutput Model::forward_ids(const Image& img, const TokenIds& ids,
                               const std::vector<LinearizedToken>& tokens) const {
  if (tokens.size() != ids.token.size())
    shape_error("token metadata and id streams must have equal length");
  ModelGraph g(cfg_, params_, nullptr);
  auto nodes = g.forward(img, ids);
  return extract_output(g, nodes, tokens);
}

Matrix attention_forward(const Matrix& q_in, const Matrix& kv_in,
                         const AttentionParams& p, int num_heads,
                         const std::vector<bool>* key_mask,
                         std::vector<Matrix>* probs_out) {
  if (num_heads <= 0 || p.wq.cols % num_heads != 0)
    shape_error("num_heads must divide the embedding width");
  ModelConfig fake;  // only embed_dim/num_heads are consulted by attention()
  fake.embed_dim = p.wq.cols;
  fake.num_heads = num_heads;
  ModelParams none;
  ModelGraph g(fake, none, nullptr);
  Matrix bias;
  const Matrix* bias_ptr = nullptr;
  if (key_mask) {
    bias = mask_bias_matrix(q_in.rows, kv_in.rows, *key_mask);
    bias_ptr = &bias;
  }
  std::vector<Tape::Id> probs;
  Tape::Id out = g.attention(g.t.leaf(q_in), g.t.leaf(kv_in), p, bias_ptr,
                             probs_out ? &probs : nullptr);
  if (probs_out)
    for (Tape::Id id : probs) probs_out->push_back(g.t.value(id));
  return g.t.value(out);
}

double loss_value(const ModelOutput& out, const SupervisionTarget& target,
                  double lambda_cell) {
  double mx = out.op_logits[0];
  for (double v : out.op_logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : out.op_logits) sum += std::exp(v - mx);
  double ce = std::log(sum) + mx - out.op_logits[static_cast<size_t>(target.op)];
  if (lambda_cell == 0.0) return ce;
  std::set<CellRef> wanted(target.cells.begin(), target.cells.end());
  auto cells = out.cell_scores();
  if (cells.empty()) return ce;
  double bce = 0.0;
  for (const CellScore& cs : cells)
    bce += bce_term(cs.score, wanted.count(cs.cell) ? 1.0 : 0.0);
  return ce + lambda_cell * bce / static_cast<double>(cells.size());
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainExample make_train_example(const Image& img, const std::string& question,
                                const DataTable& table, const SupervisionTarget& target,
                                const Vocabulary& vocab, int max_seq_len) {
  TrainExample ex;
  ex.image = img;
  ex.lin = linearize(question, table, max_seq_len);
  ex.ids = ids_from_linearized(ex.lin, vocab);
  ex.target = target;
  return ex;
}

namespace {

struct LossNodes {
  Tape::Id loss;
  ModelGraph::ForwardNodes fwd;
};

LossNodes build_loss(ModelGraph& g, const TrainExample& ex, double lambda_cell) {
  auto fwd = g.forward(ex.image, ex.ids);
  Tape::Id loss = g.t.ce_loss(fwd.op_logits, static_cast<int>(ex.target.op));
  if (lambda_cell != 0.0) {
    auto [M, cells] = cell_aggregation(ex.lin.tokens);
    if (!cells.empty()) {
      std::set<CellRef> wanted(ex.target.cells.begin(), ex.target.cells.end());
      std::vector<double> labels(cells.size());
      for (size_t i = 0; i < cells.size(); ++i)
        labels[i] = wanted.count(cells[i]) ? 1.0 : 0.0;
      Tape::Id cell_scores = g.t.linear_const(M, fwd.token_scores);
      Tape::Id bce = g.t.bce_logits_loss(cell_scores, labels);
      loss = g.t.add(loss, g.t.scale(bce, lambda_cell));
    }
  }
  return {loss, fwd};
}

int argmax_row(const Matrix& row) {
  int best = 0;
  for (int j = 1; j < row.cols; ++j)
    if (row.at(0, j) > row.at(0, best)) best = j;
  return best;
}

}  // namespace

double example_loss_grad(const Model& model, const TrainExample& ex,
                         double lambda_cell, ModelParams& grads) {
  ModelGraph g(model.config(), model.params(), &grads);
  LossNodes n = build_loss(g, ex, lambda_cell);
  g.t.backward(n.loss);
  g.accumulate_grads();
  return g.t.value(n.loss).at(0, 0);
}

double example_loss(const Model& model, const TrainExample& ex, double lambda_cell) {
  ModelGraph g(model.config(), model.params(), nullptr);
  LossNodes n = build_loss(g, ex, lambda_cell);
  return g.t.value(n.loss).at(0, 0);
}

std::string curve_to_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream out;
  out << "epoch,split,loss,op_acc\n";
  for (const CurvePoint& p : curve)
    out << p.epoch << "," << p.split << "," << format_number(p.loss) << ","
        << format_number(p.op_acc) << "\n";
  return out.str();
}

TrainResult train(Model& model, const std::vector<TrainExample>& train_set,
                  const std::vector<TrainExample>& val_set, const TrainOptions& opts) {
  if (opts.epochs < 0 || opts.batch_size < 1 || !(opts.lr >= 0.0))
    shape_error("invalid training options");
  if (train_set.empty()) shape_error("empty training set");

  std::vector<Matrix*> theta;
  model.params().for_each_tensor(
      [&theta](const std::string&, Matrix& m) { theta.push_back(&m); });
  ModelParams grads = zeros_like(model.params());
  ModelParams adam_m = zeros_like(model.params());
  ModelParams adam_v = zeros_like(model.params());
  std::vector<Matrix*> gptr, mptr, vptr;
  grads.for_each_tensor([&gptr](const std::string&, Matrix& m) { gptr.push_back(&m); });
  adam_m.for_each_tensor([&mptr](const std::string&, Matrix& m) { mptr.push_back(&m); });
  adam_v.for_each_tensor([&vptr](const std::string&, Matrix& m) { vptr.push_back(&m); });

  TrainResult result;
  long long step = 0;
  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(opts.shuffle_seed);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng er = shuffle_rng.split(static_cast<std::uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[er.next_below(i)]);

    double loss_sum = 0.0;
    int correct = 0;
    for (size_t start = 0; start < order.size(); start += opts.batch_size) {
      size_t end = std::min(order.size(), start + opts.batch_size);
      for (Matrix* gm : gptr) gm->fill(0.0);
      for (size_t k = start; k < end; ++k) {
        const TrainExample& ex = train_set[order[k]];
        ModelGraph g(model.config(), model.params(), &grads);
        LossNodes n = build_loss(g, ex, opts.lambda_cell);
        double loss = g.t.value(n.loss).at(0, 0);
        if (!std::isfinite(loss))
          throw NeuralError(NeuralError::Kind::DivergedLoss,
                            "non-finite training loss at epoch " + std::to_string(epoch));
        g.t.backward(n.loss);
        g.accumulate_grads();
        loss_sum += loss;
        if (argmax_row(g.t.value(n.fwd.op_logits)) == static_cast<int>(ex.target.op))
          ++correct;
      }
      double inv = 1.0 / static_cast<double>(end - start);
      ++step;
      double bc1 = 1.0 - std::pow(opts.adam_beta1, static_cast<double>(step));
      double bc2 = 1.0 - std::pow(opts.adam_beta2, static_cast<double>(step));
      for (size_t ti = 0; ti < theta.size(); ++ti) {
        Matrix& th = *theta[ti];
        Matrix& gm = *gptr[ti];
        Matrix& mm = *mptr[ti];
        Matrix& vm = *vptr[ti];
        for (size_t j = 0; j < th.a.size(); ++j) {
          double grad = gm.a[j] * inv;
          mm.a[j] = opts.adam_beta1 * mm.a[j] + (1.0 - opts.adam_beta1) * grad;
          vm.a[j] = opts.adam_beta2 * vm.a[j] + (1.0 - opts.adam_beta2) * grad * grad;
          th.a[j] -= opts.lr * (mm.a[j] / bc1) / (std::sqrt(vm.a[j] / bc2) + opts.adam_eps);
        }
      }
    }
    result.curve.push_back({epoch, "train", loss_sum / train_set.size(),
                            static_cast<double>(correct) / train_set.size()});

    double val_loss = 0.0, val_acc = 0.0;
    if (!val_set.empty()) {
      int val_correct = 0;
      for (const TrainExample& ex : val_set) {
        ModelGraph g(model.config(), model.params(), nullptr);
        LossNodes n = build_loss(g, ex, opts.lambda_cell);
        double loss = g.t.value(n.loss).at(0, 0);
        if (!std::isfinite(loss))
          throw NeuralError(NeuralError::Kind::DivergedLoss,
                            "non-finite validation loss at epoch " + std::to_string(epoch));
        val_loss += loss;
        if (argmax_row(g.t.value(n.fwd.op_logits)) == static_cast<int>(ex.target.op))
          ++val_correct;
      }
      val_loss /= val_set.size();
      val_acc = static_cast<double>(val_correct) / val_set.size();
    }
    result.curve.push_back({epoch, "val", val_loss, val_acc});
    result.epochs_run = epoch + 1;
    if (opts.stop_after_epoch && opts.stop_after_epoch(epoch, val_loss, val_acc)) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check_tensors(const std::vector<TensorToCheck>& tensors,
                                   const std::function<double()>& loss_fn,
                                   double epsilon, int coords_per_tensor,
                                   std::uint64_t seed) {
  GradCheckReport report;
  Rng rng(seed);
  for (const TensorToCheck& tc : tensors) {
    if (!tc.value->same_shape(*tc.grad))
      shape_error("gradient shape mismatch for " + tc.name);
    for (double gv : tc.grad->a)
      if (!std::isfinite(gv))
        throw NeuralError(NeuralError::Kind::NonFiniteGradient,
                          "non-finite analytic gradient in " + tc.name);
    size_t n = tc.value->numel();
    if (n == 0) continue;
    std::vector<size_t> coords;
    if (n <= static_cast<size_t>(coords_per_tensor)) {
      coords.resize(n);
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      coords.reserve(coords_per_tensor);
      for (int k = 0; k < coords_per_tensor; ++k)
        coords.push_back(rng.next_below(n));
    }
    for (size_t k : coords) {
      double orig = tc.value->a[k];
      tc.value->a[k] = orig + epsilon;
      double fp = loss_fn();
      tc.value->a[k] = orig - epsilon;
      double fm = loss_fn();
      tc.value->a[k] = orig;
      double fd = (fp - fm) / (2.0 * epsilon);
      double ga = tc.grad->a[k];
      double rel = std::abs(ga - fd) / std::max({std::abs(ga), std::abs(fd), 1e-3});
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_tensor = tc.name;
      }
    }
  }
  return report;
}

GradCheckReport grad_check(Model& model, const TrainExample& ex, double lambda_cell,
                           double epsilon, int coords_per_tensor, std::uint64_t seed) {
  ModelParams grads = zeros_like(model.params());
  example_loss_grad(model, ex, lambda_cell, grads);

  std::vector<TensorToCheck> tensors;
  std::vector<Matrix*> vals;
  std::vector<const Matrix*> gs;
  std::vector<std::string> names;
  model.params().for_each_tensor([&](const std::string& name, Matrix& m) {
    names.push_back(name);
    vals.push_back(&m);
  });
  grads.for_each_tensor([&gs](const std::string&, Matrix& m) { gs.push_back(&m); });
  for (size_t i = 0; i < vals.size(); ++i)
    tensors.push_back({names[i], vals[i], gs[i]});

  auto loss_fn = [&model, &ex, lambda_cell]() {
    return example_loss(model, ex, lambda_cell);
  };
  return grad_check_tensors(tensors, loss_fn, epsilon, coords_per_tensor, seed);
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

Answer predict_answer(const ModelOutput& out, const DataTable& table) {
  int op_idx = 0;
  for (int j = 1; j < kNumOps; ++j)
    if (out.op_logits[static_cast<size_t>(j)] > out.op_logits[static_cast<size_t>(op_idx)])
      op_idx = j;
  AggregationOp op = static_cast<AggregationOp>(op_idx);

  auto cells = out.cell_scores();
  CellSelection sel;
  if (op == AggregationOp::YES || op == AggregationOp::NO) {
    // class ops need no cells
  } else if (op == AggregationOp::DIFFERENCE || op == AggregationOp::RATIO) {
    if (cells.size() < 2)
      throw NeuralError(NeuralError::Kind::ExecutionError,
                        std::string("op ") + to_string(op) +
                            " needs two cells but the input exposes " +
                            std::to_string(cells.size()));
    std::vector<size_t> idx(cells.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&cells](size_t a, size_t b) {
      if (cells[a].score != cells[b].score) return cells[a].score > cells[b].score;
      return a < b;  // ties: earlier row-major cell first
    });
    sel = {cells[idx[0]].cell, cells[idx[1]].cell};
    std::sort(sel.begin(), sel.end());  // predictions assemble row-major
  } else {
    for (const CellScore& cs : cells)
      if (cs.score > 0.0) sel.push_back(cs.cell);  // sigmoid(s) > 0.5
  }

  try {
    return execute(op, sel, table);
  } catch (const QaError& e) {
    std::ostringstream ctx;
    ctx << "executing " << to_string(op) << " over [";
    for (size_t i = 0; i < sel.size(); ++i)
      ctx << (i ? ", " : "") << "(" << sel[i].row << "," << sel[i].col << ")";
    ctx << "] failed: " << e.what();
    throw NeuralError(NeuralError::Kind::ExecutionError, ctx.str());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'Q', 'A', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<char*>(b), 4);
}
void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<char*>(b), 8);
}
void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

[[noreturn]] void ckpt_error(const std::string& msg) {
  throw std::runtime_error("checkpoint: " + msg);
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model,
                     const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) ckpt_error("cannot open for writing: " + path);
  nlohmann::json j = nlohmann::json::parse(config_to_json(model.config()));
  j["vocabulary"] = vocab.words;
  std::string js = j.dump();
  out.write(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, js.size());
  out.write(js.data(), static_cast<std::streamsize>(js.size()));
  model.params().for_each_tensor([&out](const std::string&, const Matrix& m) {
    put_u64(out, m.numel());
    for (double d : m.a) put_f64(out, d);
  });
  if (!out) ckpt_error("short write: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) ckpt_error("cannot open for reading: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) ckpt_error("bad magic in " + path);
  std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion)
    ckpt_error("unsupported version " + std::to_string(version));
  std::uint64_t js_len = get_u64(in);
  std::string js(js_len, '\0');
  in.read(js.data(), static_cast<std::streamsize>(js_len));
  if (!in) ckpt_error("truncated config in " + path);

  ModelConfig cfg = config_from_json(js);
  nlohmann::json j = nlohmann::json::parse(js);
  Vocabulary vocab;
  vocab.words = j.at("vocabulary").get<std::vector<std::string>>();
  for (size_t i = 0; i < vocab.words.size(); ++i)
    vocab.index[vocab.words[i]] = static_cast<int>(i);
  if (static_cast<int>(vocab.words.size()) != cfg.vocab_size)
    ckpt_error("vocabulary size disagrees with config");

  LoadedCheckpoint loaded{Model(cfg), std::move(vocab)};
  loaded.model.params().for_each_tensor([&in, &path](const std::string& name, Matrix& m) {
    std::uint64_t count = get_u64(in);
    if (!in || count != m.numel())
      ckpt_error("tensor " + name + " has wrong element count in " + path);
    for (double& d : m.a) d = get_f64(in);
  });
  if (!in) ckpt_error("truncated tensors in " + path);
  if (in.peek() != std::char_traits<char>::eof()) ckpt_error("trailing bytes in " + path);
  return loaded;
}

}  // namespace cqa
