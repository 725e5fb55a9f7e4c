#include "cqa/harness.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "cqa/neural.hpp"

namespace cqa {

using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

void bump(Stratum& s, bool scored, bool correct) {
  ++s.count;
  if (scored) {
    ++s.scored;
    if (correct) ++s.correct;
  }
}

void finalize(std::map<std::string, Stratum>& strata) {
  for (auto& [key, s] : strata)
    s.accuracy = s.scored > 0 ? static_cast<double>(s.correct) / s.scored : 0.0;
}

json stratum_json(const Stratum& s) {
  return {{"count", s.count},
          {"scored", s.scored},
          {"correct", s.correct},
          {"accuracy", s.accuracy}};
}

}  // namespace

const char* to_string(Pipeline p) {
  return p == Pipeline::gold_table ? "gold_table" : "extracted_table";
}

const char* to_string(Answerer a) {
  return a == Answerer::oracle_executor ? "oracle_executor" : "neural_model";
}

std::optional<Pipeline> pipeline_from_string(std::string_view s) {
  if (s == "gold_table" || s == "gold") return Pipeline::gold_table;
  if (s == "extracted_table" || s == "extracted") return Pipeline::extracted_table;
  return std::nullopt;
}

std::optional<Answerer> answerer_from_string(std::string_view s) {
  if (s == "oracle_executor" || s == "oracle") return Answerer::oracle_executor;
  if (s == "neural_model" || s == "neural") return Answerer::neural_model;
  return std::nullopt;
}

EvalReport run_eval(const LoadedDataset& data, const EvalOptions& opts) {
  namespace fs = std::filesystem;
  EvalReport rep;
  rep.pipeline = opts.pipeline;
  rep.answerer = opts.answerer;

  std::optional<LoadedCheckpoint> ckpt;
  if (opts.answerer == Answerer::neural_model) {
    if (opts.checkpoint_path.empty())
      throw std::runtime_error("the neural_model answerer needs a checkpoint");
    ckpt.emplace(load_checkpoint(opts.checkpoint_path));
  }

  std::vector<ChartValuePair> pairs;
  for (const ChartEntry& entry : data.manifest.charts) {
    std::string chart_fail;  // first setup failure; poisons every example

    std::optional<DataTable> gold;
    try {
      gold = table_from_csv(
          read_file((fs::path(data.base_dir) / entry.table_path).string()));
    } catch (const std::exception& e) {
      chart_fail = e.what();
      rep.errors.push_back({"table_error", entry.chart_id + ": " + e.what()});
    }

    std::optional<ChartSpec> spec;
    bool need_spec = opts.pipeline == Pipeline::extracted_table ||
                     opts.answerer == Answerer::neural_model;
    if (need_spec && chart_fail.empty()) {
      try {
        spec = parse_chart_spec(
            read_file((fs::path(data.base_dir) / entry.spec_path).string()));
      } catch (const std::exception& e) {
        chart_fail = e.what();
        rep.errors.push_back({"spec_error", entry.chart_id + ": " + e.what()});
      }
    }

    std::optional<DataTable> table;
    if (chart_fail.empty()) {
      if (opts.pipeline == Pipeline::gold_table) {
        table = gold;
      } else {
        try {
          table = extract_table(*spec).table;
          pairs.push_back({entry.chart_id, gold->numeric_values(),
                           table->numeric_values()});
        } catch (const std::exception& e) {
          chart_fail = e.what();
          rep.errors.push_back(
              {"extraction_error", entry.chart_id + ": " + e.what()});
          pairs.push_back({entry.chart_id, gold->numeric_values(), {}});
        }
      }
    }

    std::optional<Image> img;
    if (opts.answerer == Answerer::neural_model && chart_fail.empty()) {
      try {
        img = render_chart(*spec, ckpt->model.config().image_size);
      } catch (const std::exception& e) {
        chart_fail = e.what();
        rep.errors.push_back({"render_error", entry.chart_id + ": " + e.what()});
      }
    }

    for (const QAExample& ex : entry.qa) {
      ExampleResult er;
      er.chart_id = entry.chart_id;
      er.kind = ex.kind;
      er.question = ex.question;
      er.gold = ex.gold_answer.display();
      ++rep.total;

      Stratum& by_type = rep.by_chart_type[to_string(entry.chart_type)];
      Stratum& by_kind = rep.by_question_kind[to_string(ex.kind)];

      if (ex.unanswerable) {
        er.reason = "unanswerable";
        bump(by_type, false, false);
        bump(by_kind, false, false);
        rep.examples.push_back(std::move(er));
        continue;
      }
      er.scored = true;
      ++rep.scored;

      try {
        if (!chart_fail.empty()) throw std::runtime_error(chart_fail);
        Answer pred;
        if (opts.answerer == Answerer::oracle_executor) {
          if (!ex.supervision)
            throw std::runtime_error("example has no supervision target");
          pred = execute(ex.supervision->op, ex.supervision->cells, *table);
        } else {
          LinearizedInput lin =
              linearize(ex.question, *table, ckpt->model.config().max_seq_len);
          ModelOutput out = ckpt->model.forward(*img, lin, ckpt->vocab);
          pred = predict_answer(out, *table);
        }
        er.predicted = pred.display();
        MatchVerdict verdict = relaxed_match(er.predicted, er.gold, opts.tol);
        er.correct = verdict.correct;
        er.reason = to_string(verdict.reason);
      } catch (const std::exception& e) {
        er.correct = false;
        er.reason = e.what();
        rep.errors.push_back({"example_error", entry.chart_id + ": " + e.what()});
      }
      if (er.correct) ++rep.correct;
      bump(by_type, true, er.correct);
      bump(by_kind, true, er.correct);
      rep.examples.push_back(std::move(er));
    }
  }

  rep.relaxed_accuracy =
      rep.scored > 0 ? static_cast<double>(rep.correct) / rep.scored : 0.0;
  finalize(rep.by_chart_type);
  finalize(rep.by_question_kind);
  if (opts.pipeline == Pipeline::extracted_table) {
    if (!pairs.empty()) rep.extraction = extraction_score(pairs);
  } else {
    rep.extraction.overall = 1.0;  // the gold table is its own extraction
  }
  return rep;
}

std::string report_to_json(const EvalReport& r, int indent) {
  json j;
  j["pipeline"] = to_string(r.pipeline);
  j["answerer"] = to_string(r.answerer);
  j["total"] = r.total;
  j["scored"] = r.scored;
  j["correct"] = r.correct;
  j["relaxed_accuracy"] = r.relaxed_accuracy;
  j["by_chart_type"] = json::object();
  for (const auto& [key, s] : r.by_chart_type) j["by_chart_type"][key] = stratum_json(s);
  j["by_question_kind"] = json::object();
  for (const auto& [key, s] : r.by_question_kind)
    j["by_question_kind"][key] = stratum_json(s);
  j["extraction"] = json::object();
  j["extraction"]["overall"] = r.extraction.overall;
  j["extraction"]["per_chart"] = json::object();
  for (const ChartScore& c : r.extraction.per_chart)
    j["extraction"]["per_chart"][c.chart_id] = {
        {"cost", c.cost}, {"k", c.k}, {"score", c.score}};
  j["errors"] = json::array();
  for (const Diagnostic& d : r.errors)
    j["errors"].push_back({{"event", d.event}, {"detail", d.detail}});
  return j.dump(indent);
}

std::string report_to_csv(const EvalReport& r) {
  std::string out = "chart_id,kind,pipeline,correct,reason\n";
  for (const ExampleResult& er : r.examples) {
    out += csv_escape(er.chart_id);
    out += ',';
    out += to_string(er.kind);
    out += ',';
    out += to_string(r.pipeline);
    out += ',';
    out += er.scored ? (er.correct ? "1" : "0") : "";
    out += ',';
    out += csv_escape(er.reason);
    out += '\n';
  }
  return out;
}

}  // namespace cqa
