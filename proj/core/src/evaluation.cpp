#include "vstory/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "vstory/error.hpp"
#include "vstory/manifest.hpp"

namespace vstory {
namespace {

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

MetricTable published(std::string name, std::string title, std::string label_header, std::vector<std::string> columns,
                      std::vector<MetricRow> rows) {
  MetricTable t;
  t.name = std::move(name);
  t.title = std::move(title);
  t.label_header = std::move(label_header);
  t.columns = std::move(columns);
  t.rows = std::move(rows);
  t.metadata = {{"source", "published"}};
  return t;
}

JudgeScore mean_score(const std::vector<JudgeScore>& scores) {
  JudgeScore m;
  if (scores.empty()) return m;
  for (const auto& s : scores) {
    m.coherence += s.coherence;
    m.relevance += s.relevance;
    m.emotional_depth += s.emotional_depth;
    m.consistency += s.consistency;
    m.overall += s.overall;
    m.character_development += s.character_development;
    m.plot_progression += s.plot_progression;
    m.emotional_engagement += s.emotional_engagement;
  }
  const auto n = static_cast<double>(scores.size());
  for (double* v : {&m.coherence, &m.relevance, &m.emotional_depth, &m.consistency, &m.overall,
                    &m.character_development, &m.plot_progression, &m.emotional_engagement}) {
    *v /= n;
  }
  return m;
}

}  // namespace

void MetricTable::validate() const {
  std::set<std::string> labels;
  for (const auto& row : rows) {
    if (!labels.insert(row.label).second) throw ValidationError("table '" + name + "': duplicate row '" + row.label + "'");
    if (row.values.size() != columns.size()) {
      throw ValidationError("table '" + name + "': row '" + row.label + "' has " + std::to_string(row.values.size()) +
                            " values for " + std::to_string(columns.size()) + " columns");
    }
    for (const double v : row.values) {
      if (!(v >= 0 && v <= 10)) throw ValidationError("table '" + name + "': value outside [0,10] in row '" + row.label + "'");
    }
  }
}

const std::vector<std::string>& primary_columns() {
  static const std::vector<std::string> cols = {"Coherence", "Relevance", "Emotional Depth", "Overall Quality"};
  return cols;
}

const std::vector<std::string>& detailed_columns() {
  static const std::vector<std::string> cols = {"Character Development", "Plot Progression", "Emotional Engagement",
                                                "Overall Quality"};
  return cols;
}

MetricRow primary_row(const std::string& label, const JudgeScore& s) {
  return {label, {s.coherence, s.relevance, s.emotional_depth, s.overall}};
}

MetricRow detailed_row(const std::string& label, const JudgeScore& s) {
  return {label, {s.character_development, s.plot_progression, s.emotional_engagement, s.overall}};
}

MetricTable published_quantitative_table() {
  return published("quantitative", "Quantitative evaluation", "Model", primary_columns(),
                   {{"Qwen-VL", {7.8, 7.5, 7.4, 7.6}},
                    {"MiniGPT-4", {8.0, 7.7, 7.5, 7.8}},
                    {"LLaVA-1.5 7B", {8.2, 7.9, 7.7, 8.0}},
                    {"Our Method", {8.9, 8.7, 8.5, 8.7}}});
}

MetricTable published_ablation_table() {
  return published("ablation", "Ablation study", "Model Variant", primary_columns(),
                   {{"Full Model", {8.9, 8.7, 8.5, 8.7}},
                    {"w/o Instruction Tuning", {7.5, 7.3, 7.2, 7.4}},
                    {"w/o Reinforcement Learning", {8.1, 7.9, 7.7, 8.0}},
                    {"w/o Learned Modules", {7.8, 7.6, 7.4, 7.7}}});
}

MetricTable published_detailed_table() {
  return published("detailed", "Detailed narrative analysis", "Model", detailed_columns(),
                   {{"Qwen-VL", {7.6, 7.5, 7.4, 7.5}},
                    {"MiniGPT-4", {7.8, 7.7, 7.5, 7.7}},
                    {"LLaVA-1.5 7B", {8.0, 7.9, 7.8, 8.0}},
                    {"Our Method", {8.8, 8.7, 8.6, 8.7}}});
}

StoryGenerator model_generator(const Model<float>& model, const DecodeConfig& decode, std::string instruction) {
  return [&model, decode, instruction = std::move(instruction)](const VisualStory& story) {
    return generate(model, story.frames, instruction, decode).text;
  };
}

EvaluationResult evaluate_generations(const Corpus& eval_corpus, const Judge& judge, const StoryGenerator& generator) {
  if (eval_corpus.stories.empty()) throw ValidationError("evaluation corpus is empty");
  EvaluationResult result;
  std::vector<std::string> texts;
  std::vector<const VisualStory*> refs;
  for (const auto& story : eval_corpus.stories) {
    try {
      texts.push_back(generator(story));
    } catch (const Error& e) {
      rethrow_with_context(e, "story '" + story.id + "': ");
    }
    refs.push_back(&story);
  }
  std::vector<JudgeScore> scores;
  try {
    scores = judge.score_batch(texts, refs);
  } catch (const Error& e) {
    rethrow_with_context(e, std::string("evaluation: "));
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    result.stories.push_back({eval_corpus.stories[i].id, texts[i], scores[i]});
  }
  result.mean = mean_score(scores);
  return result;
}

MetricRow evaluate_model(const Model<float>& model, const Corpus& eval_corpus, const Judge& judge,
                         const DecodeConfig& decode, const std::string& label) {
  return primary_row(label, evaluate_generations(eval_corpus, judge, model_generator(model, decode)).mean);
}

MetricRow detailed_analysis(const Model<float>& model, const Corpus& eval_corpus, const Judge& judge,
                            const DecodeConfig& decode, const std::string& label) {
  return detailed_row(label, evaluate_generations(eval_corpus, judge, model_generator(model, decode)).mean);
}

AblationResult run_ablation(const Corpus& train_corpus, const Corpus& eval_corpus, const TrainConfig& base_config,
                            std::span<const Arm> arms, std::span<const std::uint64_t> seeds, const Judge& judge,
                            const AblationOptions& options) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (arms.empty()) throw ConfigError("ablation needs at least one arm");

  AblationResult result;
  result.primary.name = "ablation";
  result.primary.title = "Ablation study";
  result.primary.label_header = "Model Variant";
  result.primary.columns = primary_columns();
  result.detailed.name = "ablation_detailed";
  result.detailed.title = "Ablation study, detailed criteria";
  result.detailed.label_header = "Model Variant";
  result.detailed.columns = detailed_columns();

  std::string seed_list;
  for (const auto s : seeds) seed_list += (seed_list.empty() ? "" : ",") + std::to_string(s);
  for (auto* t : {&result.primary, &result.detailed}) {
    t->metadata = {{"corpus_seed", std::to_string(train_corpus.seed)},
                   {"n_eval", std::to_string(eval_corpus.stories.size())},
                   {"judge", judge.kind()},
                   {"seeds", seed_list}};
  }

  for (const auto arm : kAllArms) {
    if (std::find(arms.begin(), arms.end(), arm) == arms.end()) continue;
    std::vector<JudgeScore> per_seed;
    for (const auto seed : seeds) {
      auto config = apply_arm(base_config, arm);
      config.seed = seed;
      AblationRun run;
      run.arm = arm;
      run.seed = seed;
      try {
        auto trained = train(train_corpus, config, judge);
        const auto model = to_model(trained.checkpoint);
        const auto eval =
            evaluate_generations(eval_corpus, judge, model_generator(model, options.decode, narrative_prompt(config)));
        run.mean = eval.mean;
        run.metrics = std::move(trained.metrics);
      } catch (const Error& e) {
        rethrow_with_context(e, "arm " + std::string(to_string(arm)) + ", seed " + std::to_string(seed) + ": ");
      }
      per_seed.push_back(run.mean);
      if (options.on_run) options.on_run(run);
      result.runs.push_back(std::move(run));
    }
    const auto mean = mean_score(per_seed);
    result.primary.rows.push_back(primary_row(std::string(arm_label(arm)), mean));
    result.detailed.rows.push_back(detailed_row(std::string(arm_label(arm)), mean));
  }
  return result;
}

ReportFormat report_format_from_string(const std::string& name) {
  if (name == "csv") return ReportFormat::kCsv;
  if (name == "markdown" || name == "md") return ReportFormat::kMarkdown;
  throw ConfigError("unknown report format '" + name + "' (expected csv or markdown)");
}

std::string render_csv(const MetricTable& table) {
  table.validate();
  std::string out = csv_field(table.label_header);
  for (const auto& c : table.columns) out += "," + csv_field(c);
  out += "\n";
  for (const auto& row : table.rows) {
    out += csv_field(row.label);
    for (const double v : row.values) out += "," + format_value(v);
    out += "\n";
  }
  return out;
}

std::string render_markdown(const MetricTable& table) {
  table.validate();
  std::string out;
  if (!table.title.empty()) out += "## " + table.title + "\n\n";
  for (const auto& [key, value] : table.metadata) out += "- " + key + ": " + value + "\n";
  if (!table.metadata.empty()) out += "\n";
  out += "| " + table.label_header;
  for (const auto& c : table.columns) out += " | " + c;
  out += " |\n|---";
  for (std::size_t i = 0; i < table.columns.size(); ++i) out += "|---:";
  out += "|\n";
  for (const auto& row : table.rows) {
    out += "| " + row.label;
    for (const double v : row.values) out += " | " + format_value(v);
    out += " |\n";
  }
  return out;
}

std::vector<std::filesystem::path> emit_report(std::span<const MetricTable> tables,
                                               const std::filesystem::path& destination, ReportFormat format) {
  std::vector<std::filesystem::path> written;
  if (tables.empty()) return written;
  std::set<std::string> names;
  for (const auto& t : tables) {
    if (t.name.empty()) throw ValidationError("report table without a name");
    if (!names.insert(t.name).second) throw ValidationError("duplicate report table name '" + t.name + "'");
    t.validate();
  }
  std::error_code ec;
  std::filesystem::create_directories(destination, ec);
  if (ec) throw IoError("cannot create report directory '" + destination.string() + "': " + ec.message());
  for (const auto& t : tables) {
    const auto path = destination / (t.name + (format == ReportFormat::kCsv ? ".csv" : ".md"));
    write_file_atomic(path, format == ReportFormat::kCsv ? render_csv(t) : render_markdown(t));
    written.push_back(path);
  }
  return written;
}

}  // namespace vstory
