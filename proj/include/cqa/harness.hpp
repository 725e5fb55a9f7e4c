#pragma once
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cqa/chart_model.hpp"
#include "cqa/extraction.hpp"
#include "cqa/image.hpp"
#include "cqa/metrics.hpp"
#include "cqa/qa.hpp"

namespace cqa {

enum class QuestionKind {
  data_retrieval,
  visual,
  compositional,
  visual_compositional,
};

const char* to_string(QuestionKind k);
std::optional<QuestionKind> question_kind_from_string(std::string_view s);

struct QAExample {
  std::string chart_id;
  std::string question;
  Answer gold_answer;
  QuestionKind kind = QuestionKind::data_retrieval;
  // Executable shortcut to the gold answer. Planted unanswerable questions
  // have none; every answerable question's target executes against the gold
  // table to a relaxed match of gold_answer.
  std::optional<SupervisionTarget> supervision;
  bool unanswerable = false;
};

struct NoiseModel {
  double keypoint_sigma = 0.0;  // px, applied to mark and text geometry
  double color_sigma = 0.0;     // RGB units, applied to data-mark colors
  double label_dropout = 0.0;   // removal probability for category labels

  bool operator==(const NoiseModel&) const = default;
};

// Question-kind sampling weights; normalized at use time.
struct QuestionMix {
  double data_retrieval = 0.12;
  double visual = 0.12;
  double compositional = 0.43;
  double visual_compositional = 0.33;
};

struct GenConfig {
  int bars = 0;
  int lines = 0;
  int pies = 0;
  int questions_per_chart = 4;
  std::string split = "train";  // train | validation | test
  std::uint64_t seed = 0;
  NoiseModel noise;
  QuestionMix mix;
  // Probability a question is replaced by a planted unanswerable.
  double unanswerable_fraction = 0.0;
  // Inside visual kinds: probability of a positional template
  // (first/second category) over an extremum template (tallest/peak).
  double positional_bias = 0.5;
  // Fraction of compositional questions phrased as yes/no comparisons.
  double yesno_weight = 0.08;
  // Restrict bar/line charts to a single series.
  bool single_series_only = false;
  // Raster edge length; 0 disables rasters. Must be a positive multiple
  // of 16 when set.
  int raster_size = 0;

  void validate() const;  // throws ConfigError
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what_in) : std::runtime_error(what_in) {}
};

// Generator ground truth for one mark: which gold-table cell it encodes.
// Rows/columns are 0-based grid coordinates matching SeriesAssignment;
// pie slices key their start boundary mark to (row, 0).
struct MarkCell {
  int mark_index = -1;
  int row = -1;
  int col = -1;
  bool operator==(const MarkCell&) const = default;
};

struct GeneratedChart {
  std::string chart_id;
  ChartType chart_type = ChartType::bar;
  ChartSpec spec;        // noise already applied
  DataTable gold_table;  // rows/columns in extraction reading order
  std::vector<MarkCell> mark_cells;
  std::vector<QAExample> qa;
};

// Deterministic synthesis: same config -> identical charts, tables and
// questions. Throws ConfigError on invalid configs.
std::vector<GeneratedChart> generate_charts(const GenConfig& cfg);

struct ChartEntry {
  std::string chart_id;
  ChartType chart_type = ChartType::bar;
  std::string spec_path;   // relative to the manifest file
  std::string table_path;  // relative to the manifest file
  std::optional<std::string> raster_path;
  std::vector<MarkCell> mark_cells;
  std::vector<QAExample> qa;
};

struct DatasetManifest {
  std::string split = "train";
  std::uint64_t seed = 0;
  NoiseModel noise;
  std::vector<ChartEntry> charts;

  int total_questions() const;
};

std::string manifest_to_json(const DatasetManifest& m, int indent = 2);
DatasetManifest manifest_from_json(const std::string& raw);

// Writes manifest.json plus charts/, tables/ (and rasters/) under out_dir,
// creating directories as needed. Output bytes depend only on the config.
DatasetManifest generate_dataset(const GenConfig& cfg, const std::string& out_dir);

struct LoadedDataset {
  DatasetManifest manifest;
  std::string base_dir;  // directory the manifest's relative paths resolve in
};
LoadedDataset load_dataset(const std::string& manifest_path);

// Solid-color mark painting on a white square canvas: bars and legend
// previews as filled rectangles, line and pie points as dots. No text.
Image render_chart(const ChartSpec& spec, int size);

enum class Pipeline { gold_table, extracted_table };
enum class Answerer { oracle_executor, neural_model };
const char* to_string(Pipeline p);
const char* to_string(Answerer a);
std::optional<Pipeline> pipeline_from_string(std::string_view s);
std::optional<Answerer> answerer_from_string(std::string_view s);

struct EvalOptions {
  Pipeline pipeline = Pipeline::gold_table;
  Answerer answerer = Answerer::oracle_executor;
  std::string checkpoint_path;  // required for neural_model
  double tol = 0.05;
};

struct Stratum {
  int count = 0;    // all questions in the stratum
  int scored = 0;   // answerable ones
  int correct = 0;
  double accuracy = 0.0;  // correct / scored, 0 when nothing scored
};

struct ExampleResult {
  std::string chart_id;
  QuestionKind kind = QuestionKind::data_retrieval;
  std::string question;
  std::string predicted;
  std::string gold;
  bool scored = false;  // false for planted unanswerables
  bool correct = false;
  std::string reason;   // match reason or error description
};

struct EvalReport {
  Pipeline pipeline = Pipeline::gold_table;
  Answerer answerer = Answerer::oracle_executor;
  int total = 0;
  int scored = 0;
  int correct = 0;
  double relaxed_accuracy = 0.0;  // correct / scored
  std::map<std::string, Stratum> by_chart_type;
  std::map<std::string, Stratum> by_question_kind;
  ExtractionScore extraction;  // populated for the extracted_table pipeline
  std::vector<ExampleResult> examples;
  std::vector<Diagnostic> errors;  // per-example failures, never fatal
};

// Runs every question in the dataset through the chosen pipeline/answerer
// pair. Per-example failures are recorded and scored as incorrect; the
// stratum counts always sum to the manifest's question total.
EvalReport run_eval(const LoadedDataset& data, const EvalOptions& opts);

std::string report_to_json(const EvalReport& r, int indent = 2);
std::string report_to_csv(const EvalReport& r);

}  // namespace cqa
