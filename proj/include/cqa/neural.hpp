#pragma once
#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cqa/autodiff.hpp"
#include "cqa/chart_model.hpp"
#include "cqa/image.hpp"
#include "cqa/qa.hpp"

namespace cqa {

struct NeuralError : std::runtime_error {
  enum class Kind {
    ShapeError,
    IdOutOfRange,
    NonFiniteGradient,
    DivergedLoss,
    ExecutionError,
  };
  NeuralError(Kind k, const std::string& what_in)
      : std::runtime_error(what_in), kind(k) {}
  Kind kind;
};

// Desk-scale two-branch model: a patch-based visual encoder and a
// table/question encoder fused by a stack of cross-modality blocks, with an
// operation classification head and a per-token cell relevance head.
struct ModelConfig {
  int image_size = 64;
  int patch_size = 16;
  int embed_dim = 64;
  int num_heads = 4;
  int vit_layers = 2;
  int tapas_layers = 2;
  int cross_blocks = 4;
  int vocab_size = 4;  // at least the special tokens
  int max_rows = 32;
  int max_cols = 32;
  int max_seq_len = kDefaultMaxSeqLen;
  int num_ops = kNumOps;
  std::uint64_t seed = 0;

  int patches_per_side() const { return image_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int visual_len() const { return num_patches() + 1; }  // +1 for [CLS]
  int ffn_dim() const { return 2 * embed_dim; }
  int head_dim() const { return embed_dim / num_heads; }

  void validate() const;  // throws NeuralError{ShapeError} on bad invariants
  bool operator==(const ModelConfig&) const = default;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& raw);

struct LayerNormParams {
  Matrix gamma, beta;  // each 1 x d
};
struct AttentionParams {
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;  // w*: d x d, b*: 1 x d
};
struct FfnParams {
  Matrix w1, b1, w2, b2;  // d x ffn, 1 x ffn, ffn x d, 1 x d
};
struct EncoderLayerParams {
  LayerNormParams ln_attn;
  AttentionParams attn;
  LayerNormParams ln_ffn;
  FfnParams ffn;
};
// One branch's half of a cross-modality block: cross-attention over the
// other branch's pre-block state, then self-attention, then feed-forward;
// pre-norm with residuals throughout.
struct CrossBranchParams {
  LayerNormParams ln_q, ln_kv;
  AttentionParams cross;
  LayerNormParams ln_self;
  AttentionParams self_attn;
  LayerNormParams ln_ffn;
  FfnParams ffn;
};
struct CrossBlockParams {
  CrossBranchParams visual, textual;
};

struct ModelParams {
  Matrix patch_proj;  // (P*P*3) x d
  Matrix patch_bias;  // 1 x d
  Matrix vis_cls;     // 1 x d
  Matrix vis_pos;     // (num_patches + 1) x d
  Matrix tok_emb;     // vocab x d
  Matrix pos_emb;     // max_seq_len x d
  Matrix seg_emb;     // 2 x d
  Matrix row_emb;     // max_rows x d
  Matrix col_emb;     // max_cols x d
  std::vector<EncoderLayerParams> vit;
  std::vector<EncoderLayerParams> tapas;
  std::vector<CrossBlockParams> cross;
  LayerNormParams ln_final_vis, ln_final_txt;
  Matrix op_head;    // d x num_ops
  Matrix cell_head;  // d x 1

  // Visits every tensor in fixed declared order with a dotted path name.
  // This order defines parameter initialization, optimizer state layout and
  // the checkpoint tensor sequence.
  template <class F>
  void for_each_tensor(F&& f) {
    enumerate(*this, f);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    enumerate(*this, f);
  }

 private:
  template <class Self, class F>
  static void enumerate(Self& p, F& f) {
    f("patch_proj", p.patch_proj);
    f("patch_bias", p.patch_bias);
    f("vis_cls", p.vis_cls);
    f("vis_pos", p.vis_pos);
    f("tok_emb", p.tok_emb);
    f("pos_emb", p.pos_emb);
    f("seg_emb", p.seg_emb);
    f("row_emb", p.row_emb);
    f("col_emb", p.col_emb);
    auto ln = [&f](const std::string& base, auto& l) {
      f(base + ".gamma", l.gamma);
      f(base + ".beta", l.beta);
    };
    auto attn = [&f](const std::string& base, auto& a) {
      f(base + ".wq", a.wq);
      f(base + ".bq", a.bq);
      f(base + ".wk", a.wk);
      f(base + ".bk", a.bk);
      f(base + ".wv", a.wv);
      f(base + ".bv", a.bv);
      f(base + ".wo", a.wo);
      f(base + ".bo", a.bo);
    };
    auto ffn = [&f](const std::string& base, auto& x) {
      f(base + ".w1", x.w1);
      f(base + ".b1", x.b1);
      f(base + ".w2", x.w2);
      f(base + ".b2", x.b2);
    };
    auto enc_layer = [&](const std::string& base, auto& l) {
      ln(base + ".ln_attn", l.ln_attn);
      attn(base + ".attn", l.attn);
      ln(base + ".ln_ffn", l.ln_ffn);
      ffn(base + ".ffn", l.ffn);
    };
    auto branch = [&](const std::string& base, auto& b) {
      ln(base + ".ln_q", b.ln_q);
      ln(base + ".ln_kv", b.ln_kv);
      attn(base + ".cross", b.cross);
      ln(base + ".ln_self", b.ln_self);
      attn(base + ".self_attn", b.self_attn);
      ln(base + ".ln_ffn", b.ln_ffn);
      ffn(base + ".ffn", b.ffn);
    };
    for (size_t i = 0; i < p.vit.size(); ++i)
      enc_layer("vit." + std::to_string(i), p.vit[i]);
    for (size_t i = 0; i < p.tapas.size(); ++i)
      enc_layer("tapas." + std::to_string(i), p.tapas[i]);
    for (size_t i = 0; i < p.cross.size(); ++i) {
      branch("cross." + std::to_string(i) + ".visual", p.cross[i].visual);
      branch("cross." + std::to_string(i) + ".textual", p.cross[i].textual);
    }
    ln("ln_final_vis", p.ln_final_vis);
    ln("ln_final_txt", p.ln_final_txt);
    f("op_head", p.op_head);
    f("cell_head", p.cell_head);
  }
};

struct CellScore {
  CellRef cell;
  double score = 0.0;  // raw logit; relevance probability is sigmoid(score)
};

struct ModelOutput {
  std::array<double, kNumOps> op_logits{};
  std::vector<double> token_scores;       // one raw score per input token
  std::vector<LinearizedToken> tokens;    // the tokens those scores refer to
  std::vector<double> visual_cls, textual_cls;  // pooled final [CLS] states

  // Per-cell scores: mean of the cell's token scores, row-major order.
  // Covers exactly the table cells present in the (possibly truncated)
  // linearized input.
  std::vector<CellScore> cell_scores() const;
};

// Tokens -> embedding-id streams for the table branch.
struct TokenIds {
  std::vector<int> token;    // vocabulary ids
  std::vector<int> segment;  // 0 question side, 1 table side
  std::vector<int> row, col;
};
TokenIds ids_from_linearized(const LinearizedInput& lin, const Vocabulary& vocab);

class Model {
 public:
  explicit Model(ModelConfig cfg);  // validates and seed-initializes params

  const ModelConfig& config() const { return cfg_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  // Patch embedding: non-overlapping P x P patches flattened (y, x, channel),
  // linearly projected, a learned [CLS] row prepended and positional
  // embeddings added. Output is visual_len() x d.
  Matrix patchify(const Image& img) const;

  // Token embedding: sum of token, sequence-position, segment, row and
  // column embeddings. Position is the stream index. Output is n x d.
  Matrix embed_tokens(const TokenIds& ids) const;

  // Pre-norm transformer stack; empty layer list is the identity. The
  // optional mask marks key positions (true = masked out of attention).
  Matrix encode(const Matrix& input, const std::vector<EncoderLayerParams>& layers,
                const std::vector<bool>* key_padding_mask = nullptr) const;

  // One cross-modality block applied to (visual, textual) states.
  std::pair<Matrix, Matrix> apply_cross_block(const Matrix& vis, const Matrix& txt,
                                              const CrossBlockParams& block) const;

  ModelOutput forward(const Image& img, const LinearizedInput& lin,
                      const Vocabulary& vocab) const;
  ModelOutput forward_ids(const Image& img, const TokenIds& ids,
                          const std::vector<LinearizedToken>& tokens) const;

 private:
  ModelConfig cfg_;
  ModelParams params_;
  friend struct ModelGraph;
};

// Bare multi-head attention on plain matrices (queries from q_in, keys and
// values from kv_in). probs_out, if given, receives one attention matrix per
// head; mask marks key positions excluded from attention.
Matrix attention_forward(const Matrix& q_in, const Matrix& kv_in,
                         const AttentionParams& p, int num_heads,
                         const std::vector<bool>* key_mask = nullptr,
                         std::vector<Matrix>* probs_out = nullptr);

// Cross-entropy over the operation head plus lambda times the mean
// binary-cross-entropy of per-cell relevance against target.cells. Uses the
// cells present in the output; an empty cell set contributes zero.
double loss_value(const ModelOutput& out, const SupervisionTarget& target,
                  double lambda_cell = 1.0);

struct TrainExample {
  Image image;
  LinearizedInput lin;
  TokenIds ids;
  SupervisionTarget target;
};
TrainExample make_train_example(const Image& img, const std::string& question,
                                const DataTable& table, const SupervisionTarget& target,
                                const Vocabulary& vocab, int max_seq_len);

struct TrainOptions {
  int epochs = 10;
  int batch_size = 8;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_cell = 1.0;
  std::uint64_t shuffle_seed = 1;
  // Invoked after each epoch's validation pass; return true to stop early.
  std::function<bool(int epoch, double val_loss, double val_op_acc)> stop_after_epoch;
};

struct CurvePoint {
  int epoch = 0;
  std::string split;  // "train" or "val"
  double loss = 0.0;
  double op_acc = 0.0;
};
std::string curve_to_csv(const std::vector<CurvePoint>& curve);

struct TrainResult {
  std::vector<CurvePoint> curve;
  int epochs_run = 0;
};

// Adam with seeded shuffling; one optimizer step per mini-batch, gradients
// averaged over the batch. Throws NeuralError{DivergedLoss} when a non-finite
// loss appears. Deterministic for fixed seeds and inputs.
TrainResult train(Model& model, const std::vector<TrainExample>& train_set,
                  const std::vector<TrainExample>& val_set, const TrainOptions& opts);

// Loss and gradient of one example; gradients accumulate into grads (which
// must mirror the model's shapes). Returns the loss.
double example_loss_grad(const Model& model, const TrainExample& ex,
                         double lambda_cell, ModelParams& grads);
double example_loss(const Model& model, const TrainExample& ex, double lambda_cell);
ModelParams zeros_like(const ModelParams& p);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  size_t coords_checked = 0;
};

// Generic finite-difference checker: |analytic - central_diff| relative to
// max(|analytic|, |central_diff|, 1e-3), over up to coords_per_tensor seeded
// random coordinates of each tensor. Throws NeuralError{NonFiniteGradient}
// if an analytic gradient entry is not finite.
struct TensorToCheck {
  std::string name;
  Matrix* value = nullptr;      // perturbed in place, then restored
  const Matrix* grad = nullptr; // analytic gradient, same shape
};
GradCheckReport grad_check_tensors(const std::vector<TensorToCheck>& tensors,
                                   const std::function<double()>& loss_fn,
                                   double epsilon = 1e-5, int coords_per_tensor = 200,
                                   std::uint64_t seed = 0);

// Whole-model check against the training loss on one example.
GradCheckReport grad_check(Model& model, const TrainExample& ex,
                           double lambda_cell = 1.0, double epsilon = 1e-5,
                           int coords_per_tensor = 200, std::uint64_t seed = 0);

// Decode an output into an executable selection and run it against the
// table: argmax operation (lowest index wins ties), cells with relevance
// above 0.5 in row-major order -- except DIFFERENCE/RATIO, which take the
// top two scores, and YES/NO, which need no cells. Execution failures are
// rethrown as NeuralError{ExecutionError} with op/cell context.
Answer predict_answer(const ModelOutput& out, const DataTable& table);

// Checkpoint: "CQAT" magic, format version, length-prefixed config JSON
// (including the vocabulary), then every tensor in declared order as a
// count-prefixed little-endian float64 array.
void save_checkpoint(const std::string& path, const Model& model,
                     const Vocabulary& vocab);
struct LoadedCheckpoint {
  Model model;
  Vocabulary vocab;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace cqa
