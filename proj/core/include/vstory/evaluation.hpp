#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vstory/corpus.hpp"
#include "vstory/judge.hpp"
#include "vstory/model.hpp"
#include "vstory/training.hpp"

namespace vstory {

struct MetricRow {
  std::string label;
  std::vector<double> values;

  bool operator==(const MetricRow&) const = default;
};

struct MetricTable {
  std::string name;  // file stem used by emit_report
  std::string title;
  std::string label_header = "Model";
  std::vector<std::string> columns;
  std::vector<MetricRow> rows;
  std::map<std::string, std::string> metadata;

  // Values in [0,10], unique labels, one value per column.
  void validate() const;
  bool operator==(const MetricTable&) const = default;
};

// "Coherence", "Relevance", "Emotional Depth", "Overall Quality"
const std::vector<std::string>& primary_columns();
// "Character Development", "Plot Progression", "Emotional Engagement", "Overall Quality"
const std::vector<std::string>& detailed_columns();

MetricRow primary_row(const std::string& label, const JudgeScore& score);
MetricRow detailed_row(const std::string& label, const JudgeScore& score);

// Published scores for the three result tables, kept as report fixtures.
// Their metadata carries source=published.
MetricTable published_quantitative_table();
MetricTable published_ablation_table();
MetricTable published_detailed_table();

// Produces the generated narrative for one story.
using StoryGenerator = std::function<std::string(const VisualStory&)>;

// Greedy (or configured) decoding from the whole-narrative prompt over all frames.
StoryGenerator model_generator(const Model<float>& model, const DecodeConfig& decode,
                               std::string instruction = story_prompt());

struct StoryEvaluation {
  std::string story_id;
  std::string generated;
  JudgeScore score;
};

struct EvaluationResult {
  std::vector<StoryEvaluation> stories;  // in corpus order
  JudgeScore mean;                       // arithmetic mean of each sub-score
};

// Errors from generation or the judge are rethrown naming the story id.
EvaluationResult evaluate_generations(const Corpus& eval_corpus, const Judge& judge, const StoryGenerator& generator);

MetricRow evaluate_model(const Model<float>& model, const Corpus& eval_corpus, const Judge& judge,
                         const DecodeConfig& decode, const std::string& label);
MetricRow detailed_analysis(const Model<float>& model, const Corpus& eval_corpus, const Judge& judge,
                            const DecodeConfig& decode, const std::string& label);

struct AblationRun {
  Arm arm = Arm::kFull;
  std::uint64_t seed = 0;
  JudgeScore mean;
  std::vector<MetricsRecord> metrics;
};

struct AblationResult {
  MetricTable primary;   // one row per arm, mean over seeds
  MetricTable detailed;
  std::vector<AblationRun> runs;  // arm-major, then seed
};

struct AblationOptions {
  DecodeConfig decode;
  std::function<void(const AblationRun&)> on_run;
};

// Trains every arm for every seed (config.seed = seed) on `train_corpus`,
// evaluates each on `eval_corpus` with the arm's narrative_prompt, and
// averages per arm. Rows follow the kAllArms order restricted to `arms`.
AblationResult run_ablation(const Corpus& train_corpus, const Corpus& eval_corpus, const TrainConfig& base_config,
                            std::span<const Arm> arms, std::span<const std::uint64_t> seeds, const Judge& judge,
                            const AblationOptions& options = {});

enum class ReportFormat { kCsv, kMarkdown };

ReportFormat report_format_from_string(const std::string& name);

std::string render_csv(const MetricTable& table);
std::string render_markdown(const MetricTable& table);

// One file per table, named <table.name>.csv or <table.name>.md. Returns the
// written paths; an empty list writes nothing.
std::vector<std::filesystem::path> emit_report(std::span<const MetricTable> tables,
                                               const std::filesystem::path& destination, ReportFormat format);

}  // namespace vstory
