#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <memory>
#include <nlohmann/json.hpp>
#include <sstream>

#include "vstory/checkpoint.hpp"
#include "vstory/corpus.hpp"
#include "vstory/error.hpp"
#include "vstory/evaluation.hpp"
#include "vstory/external_judge.hpp"
#include "vstory/gradcheck.hpp"
#include "vstory/judge.hpp"
#include "vstory/manifest.hpp"
#include "vstory/tasks.hpp"
#include "vstory/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace vstory;

namespace {

struct JudgeFlags {
  std::string kind = "rubric";
  std::string cache_dir = ".vstory-judge-cache";
};

void add_judge_flags(CLI::App* cmd, JudgeFlags& flags) {
  cmd->add_option("--judge", flags.kind, "Judge kind")->check(CLI::IsMember({"rubric", "external"}));
  cmd->add_option("--judge-cache", flags.cache_dir, "Reply cache directory for the external judge");
}

std::unique_ptr<Judge> make_judge(const JudgeFlags& flags) {
  if (flags.kind == "rubric") return std::make_unique<RubricJudge>();
  auto config = ExternalJudgeConfig::from_env();
  config.cache_dir = flags.cache_dir;
  return std::make_unique<ExternalJudge>(std::move(config));
}

json judge_json(const JudgeFlags& flags) {
  json j = {{"kind", flags.kind}};
  if (flags.kind == "external") {
    j["cache_dir"] = flags.cache_dir;
    j["prompt_version"] = std::string(judge_prompt_version());
  }
  return j;
}

json decode_json(const DecodeConfig& d) {
  return {{"mode", d.mode == DecodeMode::kGreedy ? "greedy" : "sample"},
          {"temperature", d.temperature},
          {"max_len", d.max_len},
          {"seed", d.seed}};
}

struct Invocation {
  RunManifest manifest;
  fs::path manifest_path;

  void finish() {
    manifest.finished_at = utc_timestamp();
    hash_artifacts(manifest);
    write_manifest(manifest, manifest_path);
  }
};

Invocation begin(const std::string& command, int argc, char** argv) {
  Invocation inv;
  inv.manifest.command = command;
  inv.manifest.argv.assign(argv, argv + argc);
  inv.manifest.started_at = utc_timestamp();
  inv.manifest.code_version = code_version();
  return inv;
}

fs::path beside(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

void print_result(const json& j) { std::cout << j.dump() << "\n"; }

[[noreturn]] void fail(const std::string& category, const std::string& message, int code) {
  std::cerr << json{{"status", "error"}, {"category", category}, {"message", message}}.dump() << "\n";
  std::exit(code);
}

std::vector<std::uint64_t> parse_seeds(const std::string& spec) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("invalid seed '" + item + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("no seeds given");
  return seeds;
}

std::vector<Arm> parse_arms(const std::string& spec) {
  std::vector<Arm> arms;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) arms.push_back(arm_from_string(item));
  }
  if (arms.empty()) throw ConfigError("no arms given");
  return arms;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual storytelling: corpus generation, instruction tuning, REINFORCE fine-tuning and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());
  std::string manifest_override;

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic visual-story corpus");
  std::uint64_t gen_seed = 0;
  int gen_n = 80, gen_min = kMinFrames, gen_max = kMaxFrames;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "Generator seed")->required();
  gen->add_option("--n", gen_n, "Number of stories")->capture_default_str();
  gen->add_option("--min-frames", gen_min, "Minimum frames per story")->capture_default_str();
  gen->add_option("--max-frames", gen_max, "Maximum frames per story")->capture_default_str();
  gen->add_option("--out", gen_out, "Output corpus file")->required();
  gen->add_option("--manifest", manifest_override, "Manifest path (default <out>.manifest.json)");

  // split-corpus
  auto* split = app.add_subcommand("split-corpus", "Split a corpus into train/val/test files");
  std::string split_corpus_path, split_out;
  std::uint64_t split_seed = 0;
  SplitRatios ratios;
  split->add_option("--corpus", split_corpus_path, "Corpus file")->required()->check(CLI::ExistingFile);
  split->add_option("--seed", split_seed, "Shuffle seed")->required();
  split->add_option("--train", ratios.train, "Train fraction")->capture_default_str();
  split->add_option("--val", ratios.val, "Validation fraction")->capture_default_str();
  split->add_option("--test", ratios.test, "Test fraction")->capture_default_str();
  split->add_option("--out", split_out, "Output directory (train.json, val.json, test.json)")->required();
  split->add_option("--manifest", manifest_override, "Manifest path (default <out>/manifest.json)");

  // build-tasks
  auto* tasks = app.add_subcommand("build-tasks", "Build an instruction-tuning task set from a corpus");
  std::string tasks_corpus, tasks_weights = TrainConfig{}.task_weights, tasks_out;
  std::uint64_t tasks_seed = 0;
  std::size_t tasks_n = 1000;
  tasks->add_option("--corpus", tasks_corpus, "Corpus file")->required()->check(CLI::ExistingFile);
  tasks->add_option("--weights", tasks_weights, "Task mixture, e.g. caption=0.4,continuation=0.3")->capture_default_str();
  tasks->add_option("--seed", tasks_seed, "Sampling seed")->required();
  tasks->add_option("--n", tasks_n, "Number of examples")->capture_default_str();
  tasks->add_option("--out", tasks_out, "Output task file (JSON lines)")->required();
  tasks->add_option("--manifest", manifest_override, "Manifest path (default <out>.manifest.json)");

  // train
  auto* train_cmd = app.add_subcommand("train", "Instruction-tune, then REINFORCE fine-tune a model");
  std::string train_corpus, train_config, train_out, train_arm = "full";
  std::optional<std::uint64_t> train_seed;
  bool train_wallclock = false;
  JudgeFlags train_judge;
  train_cmd->add_option("--corpus", train_corpus, "Training corpus file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--config", train_config, "TrainConfig JSON file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", train_seed, "Override the config seed");
  train_cmd->add_option("--arm", train_arm, "Ablation arm applied to the config")
      ->check(CLI::IsMember({"full", "no_instruction_tuning", "no_reinforcement_learning", "no_learned_modules"}))
      ->capture_default_str();
  train_cmd->add_flag("--wallclock", train_wallclock, "Record wall-clock time in the metrics log");
  add_judge_flags(train_cmd, train_judge);
  train_cmd->add_option("--out", train_out, "Output directory (checkpoint.bin, metrics.jsonl, config.json)")->required();
  train_cmd->add_option("--manifest", manifest_override, "Manifest path (default <out>/manifest.json)");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint's generated narratives");
  std::string eval_ckpt, eval_corpus, eval_out, eval_format = "markdown", eval_label = "Our Method";
  bool eval_detailed = false, eval_published = false;
  DecodeConfig eval_decode;
  JudgeFlags eval_judge;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--corpus", eval_corpus, "Evaluation corpus file")->required()->check(CLI::ExistingFile);
  eval->add_option("--format", eval_format, "Report format")->check(CLI::IsMember({"csv", "markdown"}))->capture_default_str();
  eval->add_option("--label", eval_label, "Row label")->capture_default_str();
  eval->add_option("--max-len", eval_decode.max_len, "Maximum generated tokens")->capture_default_str();
  eval->add_flag("--detailed", eval_detailed, "Also write the detailed narrative analysis table");
  eval->add_flag("--with-published", eval_published, "Also write the published reference tables");
  add_judge_flags(eval, eval_judge);
  eval->add_option("--out", eval_out, "Output directory")->required();
  eval->add_option("--manifest", manifest_override, "Manifest path (default <out>/manifest.json)");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate every ablation arm over several seeds");
  std::string abl_corpus, abl_eval_corpus, abl_config, abl_seeds = "1,2,3", abl_out, abl_format = "markdown";
  std::string abl_arms = "full,no_instruction_tuning,no_reinforcement_learning,no_learned_modules";
  double abl_eval_fraction = 0.2;
  std::uint64_t abl_split_seed = 0;
  JudgeFlags abl_judge;
  ablate->add_option("--corpus", abl_corpus, "Corpus file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--eval-corpus", abl_eval_corpus, "Held-out corpus; default splits --corpus")
      ->check(CLI::ExistingFile);
  ablate->add_option("--eval-fraction", abl_eval_fraction, "Held-out share when splitting --corpus")->capture_default_str();
  ablate->add_option("--split-seed", abl_split_seed, "Seed for splitting --corpus")->capture_default_str();
  ablate->add_option("--config", abl_config, "Base TrainConfig JSON file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--seeds", abl_seeds, "Comma-separated training seeds")->capture_default_str();
  ablate->add_option("--arms", abl_arms, "Comma-separated arms")->capture_default_str();
  ablate->add_option("--format", abl_format, "Report format")->check(CLI::IsMember({"csv", "markdown"}))->capture_default_str();
  add_judge_flags(ablate, abl_judge);
  ablate->add_option("--out", abl_out, "Output directory")->required();
  ablate->add_option("--manifest", manifest_override, "Manifest path (default <out>/manifest.json)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences on the micro model");
  GradcheckOptions gc_options;
  double gc_tolerance = 1e-4;
  bool gc_no_cross = false;
  std::string gc_manifest = "gradcheck.manifest.json";
  gc->add_option("--seed", gc_options.seed, "Parameter and input seed")->capture_default_str();
  gc->add_option("--epsilon", gc_options.epsilon, "Finite-difference step")->capture_default_str();
  gc->add_option("--tolerance", gc_tolerance, "Maximum accepted relative error")->capture_default_str();
  gc->add_flag("--no-cross-attention", gc_no_cross, "Check the pooled-visual variant");
  gc->add_option("--manifest", gc_manifest, "Manifest path")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("usage", e.what(), 2);
  }

  try {
    if (gen->parsed()) {
      auto inv = begin("gen-corpus", argc, argv);
      inv.manifest_path = manifest_override.empty() ? beside(gen_out) : fs::path(manifest_override);
      const auto corpus = generate_synthetic_corpus(gen_seed, gen_n, {gen_min, gen_max});
      save_corpus(corpus, gen_out);
      inv.manifest.config_json = json{{"n", gen_n}, {"min_frames", gen_min}, {"max_frames", gen_max}}.dump();
      inv.manifest.seeds = {{"corpus", gen_seed}};
      inv.manifest.outputs = {{"corpus", gen_out}};
      inv.finish();
      print_result({{"status", "ok"}, {"stories", corpus.stories.size()}, {"out", gen_out}});
    } else if (split->parsed()) {
      auto inv = begin("split-corpus", argc, argv);
      inv.manifest_path = manifest_override.empty() ? fs::path(split_out) / "manifest.json" : fs::path(manifest_override);
      const auto parts = split_corpus(load_corpus(split_corpus_path), ratios, split_seed);
      fs::create_directories(split_out);
      const fs::path dir(split_out);
      save_corpus(parts.train, dir / "train.json");
      save_corpus(parts.val, dir / "val.json");
      save_corpus(parts.test, dir / "test.json");
      inv.manifest.config_json = json{{"train", ratios.train}, {"val", ratios.val}, {"test", ratios.test}}.dump();
      inv.manifest.seeds = {{"split", split_seed}};
      inv.manifest.inputs = {{"corpus", split_corpus_path}};
      inv.manifest.outputs = {{"train", (dir / "train.json").string()},
                              {"val", (dir / "val.json").string()},
                              {"test", (dir / "test.json").string()}};
      inv.finish();
      print_result({{"status", "ok"},
                    {"train", parts.train.stories.size()},
                    {"val", parts.val.stories.size()},
                    {"test", parts.test.stories.size()}});
    } else if (tasks->parsed()) {
      auto inv = begin("build-tasks", argc, argv);
      inv.manifest_path = manifest_override.empty() ? beside(tasks_out) : fs::path(manifest_override);
      const auto corpus = load_corpus(tasks_corpus);
      const auto examples = build_task_mixture(corpus, parse_task_weights(tasks_weights), tasks_seed, tasks_n);
      save_task_set(examples, tasks_out);
      inv.manifest.config_json = json{{"weights", tasks_weights}, {"n", tasks_n}}.dump();
      inv.manifest.seeds = {{"tasks", tasks_seed}};
      inv.manifest.inputs = {{"corpus", tasks_corpus}};
      inv.manifest.outputs = {{"tasks", tasks_out}};
      inv.finish();
      print_result({{"status", "ok"}, {"examples", examples.size()}, {"out", tasks_out}});
    } else if (train_cmd->parsed()) {
      auto inv = begin("train", argc, argv);
      const fs::path dir(train_out);
      inv.manifest_path = manifest_override.empty() ? dir / "manifest.json" : fs::path(manifest_override);
      auto config = apply_arm(load_train_config(train_config), arm_from_string(train_arm));
      if (train_seed) config.seed = *train_seed;
      const auto corpus = load_corpus(train_corpus);
      const auto judge = make_judge(train_judge);
      TrainOptions options;
      options.record_wallclock = train_wallclock;
      auto result = train(corpus, config, *judge, options);
      result.checkpoint.arm = train_arm;
      fs::create_directories(dir);
      save_checkpoint(result.checkpoint, dir / "checkpoint.bin");
      write_file_atomic(dir / "metrics.jsonl", metrics_to_jsonl(result.metrics));
      write_file_atomic(dir / "config.json", train_config_to_json(config) + "\n");
      inv.manifest.config_json =
          json{{"train", json::parse(train_config_to_json(config))}, {"arm", train_arm}, {"judge", judge_json(train_judge)}}
              .dump();
      inv.manifest.seeds = {{"train", config.seed}, {"corpus", corpus.seed}};
      inv.manifest.inputs = {{"corpus", train_corpus}, {"config", train_config}};
      inv.manifest.outputs = {{"checkpoint", (dir / "checkpoint.bin").string()},
                              {"metrics", (dir / "metrics.jsonl").string()},
                              {"config", (dir / "config.json").string()}};
      inv.finish();
      const auto& last = result.metrics.back();
      print_result({{"status", "ok"}, {"steps", result.metrics.size()}, {"final_nll", last.nll}, {"out", train_out}});
    } else if (eval->parsed()) {
      auto inv = begin("evaluate", argc, argv);
      const fs::path dir(eval_out);
      inv.manifest_path = manifest_override.empty() ? dir / "manifest.json" : fs::path(manifest_override);
      eval_decode.validate();
      const auto checkpoint_id = sha256_file(eval_ckpt);
      const auto checkpoint = load_checkpoint(eval_ckpt);
      const auto model = to_model(checkpoint);
      const auto prompt = narrative_prompt(apply_arm(TrainConfig{}, arm_from_string(checkpoint.arm)));
      const auto corpus = load_corpus(eval_corpus);
      const auto judge = make_judge(eval_judge);
      const auto result = evaluate_generations(corpus, *judge, model_generator(model, eval_decode, prompt));

      const std::map<std::string, std::string> metadata = {{"checkpoint", checkpoint_id.substr(0, 16)},
                                                           {"corpus_seed", std::to_string(corpus.seed)},
                                                           {"n_eval", std::to_string(corpus.stories.size())},
                                                           {"judge", judge->kind()}};
      std::vector<MetricTable> tables;
      MetricTable primary{"evaluation", "Evaluation", "Model", primary_columns(), {primary_row(eval_label, result.mean)},
                          metadata};
      tables.push_back(primary);
      if (eval_detailed) {
        tables.push_back({"evaluation_detailed", "Detailed narrative analysis", "Model", detailed_columns(),
                          {detailed_row(eval_label, result.mean)}, metadata});
      }
      if (eval_published) {
        tables.push_back(published_quantitative_table());
        tables.push_back(published_ablation_table());
        tables.push_back(published_detailed_table());
      }
      const auto written = emit_report(tables, dir, report_format_from_string(eval_format));
      json generations = json::array();
      for (const auto& s : result.stories) {
        generations.push_back({{"story_id", s.story_id}, {"generated", s.generated}, {"overall", s.score.overall}});
      }
      write_file_atomic(dir / "generations.json", generations.dump(1) + "\n");

      inv.manifest.config_json = json{{"checkpoint_id", checkpoint_id},
                                      {"corpus_seed", corpus.seed},
                                      {"judge", judge_json(eval_judge)},
                                      {"decode", decode_json(eval_decode)},
                                      {"arm", checkpoint.arm},
                                      {"instruction", prompt},
                                      {"format", eval_format},
                                      {"label", eval_label},
                                      {"detailed", eval_detailed},
                                      {"with_published", eval_published}}
                                     .dump();
      inv.manifest.seeds = {{"corpus", corpus.seed}, {"decode", eval_decode.seed}};
      inv.manifest.inputs = {{"checkpoint", eval_ckpt}, {"corpus", eval_corpus}};
      for (const auto& p : written) inv.manifest.outputs[p.stem().string()] = p.string();
      inv.manifest.outputs["generations"] = (dir / "generations.json").string();
      inv.finish();
      print_result({{"status", "ok"},
                    {"overall", result.mean.overall},
                    {"coherence", result.mean.coherence},
                    {"relevance", result.mean.relevance},
                    {"emotional_depth", result.mean.emotional_depth},
                    {"consistency", result.mean.consistency}});
    } else if (ablate->parsed()) {
      auto inv = begin("ablate", argc, argv);
      const fs::path dir(abl_out);
      inv.manifest_path = manifest_override.empty() ? dir / "manifest.json" : fs::path(manifest_override);
      const auto config = load_train_config(abl_config);
      const auto seeds = parse_seeds(abl_seeds);
      const auto arms = parse_arms(abl_arms);
      const auto corpus = load_corpus(abl_corpus);
      Corpus train_part, eval_part;
      if (abl_eval_corpus.empty()) {
        auto parts = split_corpus(corpus, {1.0 - abl_eval_fraction, abl_eval_fraction, 0.0}, abl_split_seed);
        train_part = std::move(parts.train);
        eval_part = std::move(parts.val);
      } else {
        train_part = corpus;
        eval_part = load_corpus(abl_eval_corpus);
      }
      const auto judge = make_judge(abl_judge);
      AblationOptions options;
      json runs = json::array();
      options.on_run = [&runs](const AblationRun& run) {
        runs.push_back({{"arm", to_string(run.arm)}, {"seed", run.seed}, {"overall", run.mean.overall}});
        std::cerr << runs.back().dump() << "\n";
      };
      const auto result = run_ablation(train_part, eval_part, config, arms, seeds, *judge, options);
      const std::vector<MetricTable> tables = {result.primary, result.detailed};
      const auto written = emit_report(tables, dir, report_format_from_string(abl_format));
      write_file_atomic(dir / "runs.json", runs.dump(1) + "\n");

      inv.manifest.config_json = json{{"train", json::parse(train_config_to_json(config))},
                                      {"arms", abl_arms},
                                      {"judge", judge_json(abl_judge)},
                                      {"eval_fraction", abl_eval_fraction},
                                      {"format", abl_format}}
                                     .dump();
      for (std::size_t i = 0; i < seeds.size(); ++i) inv.manifest.seeds["train_" + std::to_string(i)] = seeds[i];
      inv.manifest.seeds["split"] = abl_split_seed;
      inv.manifest.seeds["corpus"] = corpus.seed;
      inv.manifest.inputs = {{"corpus", abl_corpus}, {"config", abl_config}};
      if (!abl_eval_corpus.empty()) inv.manifest.inputs["eval_corpus"] = abl_eval_corpus;
      for (const auto& p : written) inv.manifest.outputs[p.stem().string()] = p.string();
      inv.manifest.outputs["runs"] = (dir / "runs.json").string();
      inv.finish();
      json rows = json::object();
      for (const auto& row : result.primary.rows) rows[row.label] = row.values.back();
      print_result({{"status", "ok"}, {"overall", rows}});
    } else if (gc->parsed()) {
      auto inv = begin("gradcheck", argc, argv);
      inv.manifest_path = gc_manifest;
      gc_options.cross_attention = !gc_no_cross;
      const auto report = run_gradcheck(ModelConfig::micro(), gc_options);
      const bool pass = report.max_rel_error() < gc_tolerance;
      inv.manifest.config_json = json{{"model", "micro"},
                                      {"epsilon", gc_options.epsilon},
                                      {"tolerance", gc_tolerance},
                                      {"cross_attention", gc_options.cross_attention}}
                                     .dump();
      inv.manifest.seeds = {{"gradcheck", gc_options.seed}};
      inv.finish();
      print_result({{"status", pass ? "pass" : "fail"},
                    {"max_rel_error", report.max_rel_error()},
                    {"nll_max_rel_error", report.nll_max_rel_error},
                    {"nll_worst", report.nll_worst_param},
                    {"rl_max_rel_error", report.rl_max_rel_error},
                    {"rl_worst", report.rl_worst_param},
                    {"n_params", report.n_params}});
      return pass ? 0 : 1;
    }
  } catch (const Error& e) {
    fail(e.category(), e.what(), 1);
  } catch (const std::exception& e) {
    fail("internal", e.what(), 1);
  }
  return 0;
}
