// Command-line front end: dataset generation, table extraction, question
// answering, filtering, training, gradient checking and evaluation.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cqa/harness.hpp"
#include "cqa/neural.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& what_in) : std::runtime_error(what_in) {}
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Writes to the --out file when given, stdout otherwise.
void emit(const std::string& out_path, const std::string& content) {
  if (out_path.empty()) {
    std::cout << content;
    if (content.empty() || content.back() != '\n') std::cout << '\n';
    std::cout.flush();
    return;
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << content;
}

struct GlobalArgs {
  std::uint64_t seed = 0;
  std::string out;
  std::string format = "json";
};

json table_json(const cqa::DataTable& t) {
  json cells = json::array();
  for (const auto& row : t.cells) {
    json r = json::array();
    for (const auto& cell : row)
      r.push_back(cell ? json(*cell) : json(nullptr));
    cells.push_back(std::move(r));
  }
  return {{"col_headers", t.col_headers},
          {"row_labels", t.row_labels},
          {"cells", std::move(cells)}};
}

cqa::CellSelection parse_cells(const std::string& raw) {
  cqa::CellSelection cells;
  std::istringstream groups(raw);
  std::string group;
  while (std::getline(groups, group, ';')) {
    if (group.empty()) continue;
    size_t comma = group.find(',');
    if (comma == std::string::npos)
      throw UsageError("--cells expects 'row,col' pairs separated by ';'");
    try {
      cells.push_back({std::stoi(group.substr(0, comma)),
                       std::stoi(group.substr(comma + 1))});
    } catch (const std::exception&) {
      throw UsageError("--cells expects integer coordinates, got '" + group + "'");
    }
  }
  return cells;
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

struct GenArgs {
  int charts = 0;
  int bars = 0, lines = 0, pies = 0;
  int questions = 4;
  std::string split = "train";
  double noise_keypoint = 0.0, noise_color = 0.0, label_dropout = 0.0;
  double unanswerable = 0.0;
  double positional_bias = 0.5;
  double yesno_weight = 0.08;
  bool single_series = false;
  int raster = 0;
  std::vector<double> mix;
};

int run_gen(const GlobalArgs& g, const GenArgs& a) {
  if (g.out.empty()) throw UsageError("gen needs --out DIR");
  cqa::GenConfig cfg;
  cfg.bars = a.bars;
  cfg.lines = a.lines;
  cfg.pies = a.pies;
  if (a.charts > 0) {  // mixed suite, bar-heavy
    cfg.bars += (a.charts * 4 + 5) / 10;
    cfg.lines += (a.charts * 3) / 10;
    cfg.pies += a.charts - (a.charts * 4 + 5) / 10 - (a.charts * 3) / 10;
  }
  cfg.questions_per_chart = a.questions;
  cfg.split = a.split;
  cfg.seed = g.seed;
  cfg.noise = {a.noise_keypoint, a.noise_color, a.label_dropout};
  cfg.unanswerable_fraction = a.unanswerable;
  cfg.positional_bias = a.positional_bias;
  cfg.yesno_weight = a.yesno_weight;
  cfg.single_series_only = a.single_series;
  cfg.raster_size = a.raster;
  if (!a.mix.empty()) {
    if (a.mix.size() != 4)
      throw UsageError("--mix needs four weights: retrieval visual comp vis-comp");
    cfg.mix = {a.mix[0], a.mix[1], a.mix[2], a.mix[3]};
  }

  cqa::DatasetManifest m = cqa::generate_dataset(cfg, g.out);
  json summary = {
      {"manifest", (fs::path(g.out) / "manifest.json").string()},
      {"charts", m.charts.size()},
      {"questions", m.total_questions()},
      {"split", m.split},
      {"seed", m.seed},
  };
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

int run_extract(const GlobalArgs& g, const std::string& spec_path) {
  cqa::ChartSpec spec = cqa::parse_chart_spec(read_file(spec_path));
  cqa::ExtractionResult res = cqa::extract_table(spec);
  if (g.format == "csv") {
    emit(g.out, cqa::table_to_csv(res.table));
  } else {
    json diags = json::array();
    for (const auto& d : res.diagnostics)
      diags.push_back({{"event", d.event}, {"detail", d.detail}});
    json assigned = json::array();
    for (const auto& e : res.assignment.assigned)
      assigned.push_back({{"mark_index", e.mark_index},
                          {"row", e.row},
                          {"col", e.col},
                          {"method", cqa::to_string(e.method)}});
    json out = {{"table", table_json(res.table)},
                {"diagnostics", std::move(diags)},
                {"assignment",
                 {{"assigned", std::move(assigned)},
                  {"unassigned", res.assignment.unassigned}}}};
    emit(g.out, out.dump(2) + "\n");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// answer
// ---------------------------------------------------------------------------

struct AnswerArgs {
  std::string table_path;
  std::string op;
  std::string cells;
  std::string checkpoint;
  std::string spec_path;
  std::string question;
};

int run_answer(const GlobalArgs& g, const AnswerArgs& a) {
  cqa::DataTable table = cqa::table_from_csv(read_file(a.table_path));
  cqa::Answer answer;
  if (!a.checkpoint.empty()) {
    if (a.question.empty() || a.spec_path.empty())
      throw UsageError("neural answering needs --question and --spec");
    cqa::LoadedCheckpoint ckpt = cqa::load_checkpoint(a.checkpoint);
    cqa::ChartSpec spec = cqa::parse_chart_spec(read_file(a.spec_path));
    cqa::Image img = cqa::render_chart(spec, ckpt.model.config().image_size);
    cqa::LinearizedInput lin =
        cqa::linearize(a.question, table, ckpt.model.config().max_seq_len);
    answer = cqa::predict_answer(ckpt.model.forward(img, lin, ckpt.vocab), table);
  } else {
    if (a.op.empty()) throw UsageError("answer needs --op or --checkpoint");
    auto op = cqa::op_from_string(a.op);
    if (!op) throw UsageError("unknown operation '" + a.op + "'");
    answer = cqa::execute(*op, parse_cells(a.cells), table);
  }
  if (g.format == "csv")
    emit(g.out, "answer\n" + answer.display() + "\n");
  else
    emit(g.out, json{{"answer", answer.display()}}.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------------------
// filter
// ---------------------------------------------------------------------------

int run_filter(const GlobalArgs& g, const std::string& manifest_path, double tol) {
  cqa::LoadedDataset data = cqa::load_dataset(manifest_path);
  json examples = json::array();
  std::string csv = "chart_id,kind,keep,matched\n";
  int kept = 0, dropped = 0;
  for (const cqa::ChartEntry& entry : data.manifest.charts) {
    cqa::DataTable table = cqa::table_from_csv(
        read_file((fs::path(data.base_dir) / entry.table_path).string()));
    for (const cqa::QAExample& ex : entry.qa) {
      cqa::FilterDecision d = cqa::answer_in_table_filter(ex.gold_answer, table, tol);
      (d.keep ? kept : dropped)++;
      const char* matched = d.matched == cqa::FilterMatch::text ? "text"
                           : d.matched == cqa::FilterMatch::numeric ? "numeric"
                                                                    : "none";
      examples.push_back({{"chart_id", ex.chart_id},
                          {"question", ex.question},
                          {"kind", cqa::to_string(ex.kind)},
                          {"keep", d.keep},
                          {"matched", matched}});
      csv += ex.chart_id;
      csv += ',';
      csv += cqa::to_string(ex.kind);
      csv += ',';
      csv += d.keep ? "1" : "0";
      csv += ',';
      csv += matched;
      csv += '\n';
    }
  }
  if (g.format == "csv") {
    emit(g.out, csv);
  } else {
    json out = {{"kept", kept}, {"dropped", dropped}, {"examples", std::move(examples)}};
    emit(g.out, out.dump(2) + "\n");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string val_manifest;
  std::string curve;
  int epochs = 10;
  int batch = 8;
  double lr = 1e-3;
  double lambda_cell = 1.0;
  int image_size = 32;
  int patch = 16;
  int dim = 32;
  int heads = 4;
  int vit = 1;
  int tapas = 1;
  int cross = 1;
  int max_seq = 128;
};

std::vector<cqa::TrainExample> build_examples(const cqa::LoadedDataset& data,
                                              const cqa::Vocabulary& vocab,
                                              int image_size, int max_seq) {
  std::vector<cqa::TrainExample> out;
  for (const cqa::ChartEntry& entry : data.manifest.charts) {
    cqa::DataTable table = cqa::table_from_csv(
        read_file((fs::path(data.base_dir) / entry.table_path).string()));
    cqa::ChartSpec spec = cqa::parse_chart_spec(
        read_file((fs::path(data.base_dir) / entry.spec_path).string()));
    cqa::Image img = cqa::render_chart(spec, image_size);
    for (const cqa::QAExample& ex : entry.qa) {
      if (!ex.supervision) continue;  // planted unanswerables are not trained on
      out.push_back(cqa::make_train_example(img, ex.question, table,
                                            *ex.supervision, vocab, max_seq));
    }
  }
  return out;
}

cqa::Vocabulary vocab_of(const cqa::LoadedDataset& data, int max_seq) {
  std::vector<std::string> corpus;
  for (const cqa::ChartEntry& entry : data.manifest.charts) {
    cqa::DataTable table = cqa::table_from_csv(
        read_file((fs::path(data.base_dir) / entry.table_path).string()));
    for (const cqa::QAExample& ex : entry.qa) {
      cqa::LinearizedInput lin = cqa::linearize(ex.question, table, max_seq);
      for (const cqa::LinearizedToken& t : lin.tokens) corpus.push_back(t.text);
    }
  }
  return cqa::Vocabulary::build(corpus);
}

int run_train(const GlobalArgs& g, const TrainArgs& a) {
  if (g.out.empty()) throw UsageError("train needs --out CHECKPOINT");
  cqa::LoadedDataset data = cqa::load_dataset(a.manifest);
  cqa::Vocabulary vocab = vocab_of(data, a.max_seq);

  cqa::ModelConfig cfg;
  cfg.image_size = a.image_size;
  cfg.patch_size = a.patch;
  cfg.embed_dim = a.dim;
  cfg.num_heads = a.heads;
  cfg.vit_layers = a.vit;
  cfg.tapas_layers = a.tapas;
  cfg.cross_blocks = a.cross;
  cfg.vocab_size = vocab.size();
  cfg.max_seq_len = a.max_seq;
  cfg.seed = g.seed;
  cqa::Model model(cfg);

  std::vector<cqa::TrainExample> train_set =
      build_examples(data, vocab, a.image_size, a.max_seq);
  std::vector<cqa::TrainExample> val_set;
  if (!a.val_manifest.empty()) {
    cqa::LoadedDataset val = cqa::load_dataset(a.val_manifest);
    val_set = build_examples(val, vocab, a.image_size, a.max_seq);
  }
  if (train_set.empty()) throw std::runtime_error("no trainable examples found");

  cqa::TrainOptions opts;
  opts.epochs = a.epochs;
  opts.batch_size = a.batch;
  opts.lr = a.lr;
  opts.lambda_cell = a.lambda_cell;
  opts.shuffle_seed = g.seed;
  cqa::TrainResult result = cqa::train(model, train_set, val_set, opts);

  cqa::save_checkpoint(g.out, model, vocab);
  std::string curve_path = a.curve.empty() ? g.out + ".curve.csv" : a.curve;
  emit(curve_path, cqa::curve_to_csv(result.curve));

  double final_train = 0.0;
  for (const cqa::CurvePoint& p : result.curve)
    if (p.split == "train") final_train = p.loss;
  json summary = {{"checkpoint", g.out},
                  {"curve", curve_path},
                  {"epochs_run", result.epochs_run},
                  {"train_examples", train_set.size()},
                  {"val_examples", val_set.size()},
                  {"vocab_size", vocab.size()},
                  {"final_train_loss", final_train}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

int run_gradcheck(const GlobalArgs& g, int coords, double tolerance) {
  // A small generated chart provides a realistic example to differentiate.
  cqa::GenConfig gen_cfg;
  gen_cfg.bars = 1;
  gen_cfg.seed = g.seed;
  gen_cfg.single_series_only = true;
  std::vector<cqa::GeneratedChart> charts = cqa::generate_charts(gen_cfg);
  const cqa::GeneratedChart& chart = charts.front();
  const cqa::QAExample* ex = nullptr;
  for (const cqa::QAExample& cand : chart.qa)
    if (cand.supervision && !cand.supervision->cells.empty()) ex = &cand;
  if (!ex) throw std::runtime_error("generated chart has no usable question");

  std::vector<std::string> corpus;
  cqa::LinearizedInput lin = cqa::linearize(ex->question, chart.gold_table, 128);
  for (const cqa::LinearizedToken& t : lin.tokens) corpus.push_back(t.text);
  cqa::Vocabulary vocab = cqa::Vocabulary::build(corpus);

  cqa::ModelConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 16;
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.vit_layers = 1;
  cfg.tapas_layers = 1;
  cfg.cross_blocks = 1;
  cfg.vocab_size = vocab.size();
  cfg.max_seq_len = 128;
  cfg.seed = g.seed + 1;
  cqa::Model model(cfg);

  cqa::TrainExample te = cqa::make_train_example(
      cqa::render_chart(chart.spec, cfg.image_size), ex->question,
      chart.gold_table, *ex->supervision, vocab, cfg.max_seq_len);
  cqa::GradCheckReport rep = cqa::grad_check(model, te, 1.0, 1e-5, coords, g.seed);

  bool pass = rep.max_rel_error < tolerance;
  json out = {{"max_rel_error", rep.max_rel_error},
              {"worst_tensor", rep.worst_tensor},
              {"coords_checked", rep.coords_checked},
              {"tolerance", tolerance},
              {"pass", pass}};
  emit(g.out, out.dump(2) + "\n");
  return pass ? 0 : 2;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int run_eval_cmd(const GlobalArgs& g, const std::string& manifest_path,
                 const std::string& pipeline, const std::string& answerer,
                 const std::string& checkpoint, double tol) {
  auto p = cqa::pipeline_from_string(pipeline);
  if (!p) throw UsageError("unknown pipeline '" + pipeline + "'");
  auto a = cqa::answerer_from_string(answerer);
  if (!a) throw UsageError("unknown answerer '" + answerer + "'");

  cqa::LoadedDataset data = cqa::load_dataset(manifest_path);
  cqa::EvalOptions opts;
  opts.pipeline = *p;
  opts.answerer = *a;
  opts.checkpoint_path = checkpoint;
  opts.tol = tol;
  cqa::EvalReport rep = cqa::run_eval(data, opts);
  emit(g.out, g.format == "csv" ? cqa::report_to_csv(rep)
                                : cqa::report_to_json(rep) + "\n");
  return 0;
}

}  // namespace

int cli_dispatch(int argc, char** argv) {
  CLI::App app{"chart question answering toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalArgs g;
  app.add_option("--seed", g.seed, "deterministic seed shared by all commands");
  app.add_option("--out", g.out, "output file or directory");
  app.add_option("--format", g.format, "report format")
      ->check(CLI::IsMember({"json", "csv"}));

  GenArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic chart dataset");
  gen->add_option("--charts", gen_args.charts, "mixed chart count (bar-heavy)");
  gen->add_option("--bars", gen_args.bars, "bar chart count");
  gen->add_option("--lines", gen_args.lines, "line chart count");
  gen->add_option("--pies", gen_args.pies, "pie chart count");
  gen->add_option("--questions-per-chart", gen_args.questions, "questions per chart");
  gen->add_option("--split", gen_args.split, "train, validation or test");
  gen->add_option("--noise-keypoint", gen_args.noise_keypoint, "keypoint sigma, px");
  gen->add_option("--noise-color", gen_args.noise_color, "color sigma, RGB units");
  gen->add_option("--label-dropout", gen_args.label_dropout, "label dropout rate");
  gen->add_option("--unanswerable-frac", gen_args.unanswerable,
                  "fraction of planted unanswerable questions");
  gen->add_option("--positional-bias", gen_args.positional_bias,
                  "positional vs extremum template preference");
  gen->add_option("--yesno-weight", gen_args.yesno_weight,
                  "yes/no share of compositional questions");
  gen->add_flag("--single-series", gen_args.single_series,
                "restrict bar/line charts to one series");
  gen->add_option("--raster", gen_args.raster,
                  "also write square rasters of this edge length");
  gen->add_option("--mix", gen_args.mix,
                  "four question-kind weights: retrieval visual comp vis-comp")
      ->expected(4);

  std::string extract_spec;
  CLI::App* extract = app.add_subcommand("extract", "extract a table from a chart spec");
  extract->add_option("spec", extract_spec, "chart spec JSON path")->required();

  AnswerArgs answer_args;
  CLI::App* answer = app.add_subcommand("answer", "answer a question over a table");
  answer->add_option("--table", answer_args.table_path, "table CSV path")->required();
  answer->add_option("--op", answer_args.op, "aggregation to execute");
  answer->add_option("--cells", answer_args.cells,
                     "selection as 'row,col;row,col' table coordinates");
  answer->add_option("--checkpoint", answer_args.checkpoint, "neural checkpoint");
  answer->add_option("--spec", answer_args.spec_path, "chart spec for the image");
  answer->add_option("--question", answer_args.question, "question text");

  std::string filter_manifest;
  double filter_tol = 0.05;
  CLI::App* filter = app.add_subcommand("filter",
                                        "apply the answer-in-table filter");
  filter->add_option("--manifest", filter_manifest, "dataset manifest")->required();
  filter->add_option("--tol", filter_tol, "numeric tolerance");

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model on a dataset");
  train->add_option("--manifest", train_args.manifest, "training manifest")->required();
  train->add_option("--val-manifest", train_args.val_manifest, "validation manifest");
  train->add_option("--curve", train_args.curve, "loss-curve CSV path");
  train->add_option("--epochs", train_args.epochs, "training epochs");
  train->add_option("--batch", train_args.batch, "mini-batch size");
  train->add_option("--lr", train_args.lr, "learning rate");
  train->add_option("--lambda", train_args.lambda_cell, "cell-loss weight");
  train->add_option("--image-size", train_args.image_size, "square image edge");
  train->add_option("--patch", train_args.patch, "patch size");
  train->add_option("--dim", train_args.dim, "embedding width");
  train->add_option("--heads", train_args.heads, "attention heads");
  train->add_option("--vit", train_args.vit, "visual encoder layers");
  train->add_option("--tapas", train_args.tapas, "table encoder layers");
  train->add_option("--cross", train_args.cross, "cross-modality blocks");
  train->add_option("--max-seq", train_args.max_seq, "maximum token stream length");

  int gc_coords = 8;
  double gc_tol = 1e-4;
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "compare analytic gradients with finite differences");
  gradcheck->add_option("--coords", gc_coords, "coordinates checked per tensor");
  gradcheck->add_option("--tolerance", gc_tol, "maximum relative error");

  std::string eval_manifest, eval_pipeline = "gold_table",
              eval_answerer = "oracle_executor", eval_checkpoint;
  double eval_tol = 0.05;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a pipeline on a dataset");
  eval->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  eval->add_option("--pipeline", eval_pipeline, "gold_table or extracted_table");
  eval->add_option("--answerer", eval_answerer, "oracle_executor or neural_model");
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint for neural_model");
  eval->add_option("--tol", eval_tol, "relaxed-match tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return run_gen(g, gen_args);
    if (extract->parsed()) return run_extract(g, extract_spec);
    if (answer->parsed()) return run_answer(g, answer_args);
    if (filter->parsed()) return run_filter(g, filter_manifest, filter_tol);
    if (train->parsed()) return run_train(g, train_args);
    if (gradcheck->parsed()) return run_gradcheck(g, gc_coords, gc_tol);
    if (eval->parsed())
      return run_eval_cmd(g, eval_manifest, eval_pipeline, eval_answerer,
                          eval_checkpoint, eval_tol);
  } catch (const UsageError& e) {
    std::cout.flush();
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const cqa::ConfigError& e) {
    std::cout.flush();
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cout.flush();  // keep whatever partial output was produced
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

int main(int argc, char** argv) { return cli_dispatch(argc, argv); }
