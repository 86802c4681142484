#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "promptrestore/backbone.hpp"
#include "promptrestore/degrade.hpp"
#include "promptrestore/metrics.hpp"
#include "promptrestore/pipeline.hpp"
#include "promptrestore/train.hpp"

namespace promptrestore {

/// One evaluation column: a task, optionally pinned to a fixed noise level,
/// optionally read from a `{root}/clean` + `{root}/degraded` directory.
struct EvalColumn {
  std::string label;
  DegradationType task = DegradationType::noise;
  std::optional<double> sigma_255;
  std::filesystem::path directory;

  nlohmann::json to_json() const;
  static EvalColumn from_json(const nlohmann::json& j);
};

/// Table-1 column layout for a task set: sigma 15/25/50 for noise, then rain, then haze.
std::vector<EvalColumn> default_columns(const std::vector<DegradationType>& tasks);

struct ExperimentPlan {
  std::string name = "plan";
  std::vector<DegradationType> tasks{DegradationType::noise, DegradationType::rain, DegradationType::haze};
  std::string preset = "tiny";
  TrainConfig train;
  std::vector<EvalColumn> eval_sets;  // empty: default_columns(tasks)
  int repeats = 1;
  std::vector<uint64_t> seeds{0};
  std::vector<std::string> experiments{"all_in_one"};

  // Data. Synthetic clean scenes unless a directory of clean images is given.
  int train_images = 8;
  int eval_images = 8;
  int image_size = 64;
  uint64_t data_seed = 0;
  std::filesystem::path train_image_dir;
  bool evaluate_on_train_images = false;

  // Guidance. A text encoder checkpoint, or fine-tune one from the generated corpus.
  std::filesystem::path text_encoder;
  int corpus_per_category = 50;
  uint64_t corpus_seed = 0;
  int64_t text_encoder_steps = 2000;

  int stability_repeats = 15;
  int selectivity_trials = 50;
  int images_per_cell = 2;
  std::filesystem::path output_dir = "harness_out";

  /// repeats == seeds.size(), non-empty task set, known experiments, valid train config.
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentPlan from_json(const nlohmann::json& j);
  static ExperimentPlan load(const std::filesystem::path& path);
  /// 64-bit FNV-1a of the canonical JSON form, as 16 hex digits.
  std::string config_hash() const;
};

inline constexpr const char* kExperimentNames[] = {"all_in_one", "single_task", "combo_ablation",
                                                   "sgi_ablation", "confirmatory", "stability"};

/// Rows of optional cells; a missing cell renders as "-".
struct ResultTable {
  std::string title;
  std::vector<std::string> columns;  // eval column labels; "Average" is appended when rendering
  struct Row {
    std::string label;
    std::vector<std::optional<EvalRecord>> cells;
  };
  std::vector<Row> rows;

  /// Mean PSNR/SSIM over the available cells of a row (nullopt if none).
  static std::optional<EvalRecord> average(const Row& row);
  nlohmann::json to_json() const;
  std::string render() const;
};

struct Report {
  std::string experiment;
  std::string plan_name;
  std::string config_hash;
  std::vector<uint64_t> seeds;
  std::vector<ResultTable> tables;
  nlohmann::json details = nlohmann::json::object();

  nlohmann::json to_json() const;
  std::string render() const;
};

struct ChangeRow {
  std::string prompt;
  DegradationType prompt_category = DegradationType::noise;
  double distance_to_input = 0.0;  // mean absolute difference
  double psnr_to_clean = 0.0;
  Image restored;
};

/// Rows sorted by distance_to_input, largest first.
std::vector<ChangeRow> confirmatory_single(RestorationNet& model, GuidanceProvider& guidance,
                                           const ImagePair& pair, const std::vector<Instruction>& prompts);

struct SelectiveRow {
  std::string prompt;
  DegradationType prompt_category = DegradationType::noise;
  Image restored;
  std::map<DegradationType, double> psnr_to_target;  // target: clean minus that degradation
  std::vector<torch::Tensor> attention_maps;
};

/// `specs` is the composition (applied in list order); one row per prompt.
std::vector<SelectiveRow> confirmatory_multi(RestorationNet& model, GuidanceProvider& guidance, const Image& clean,
                                             const std::vector<SeededSpec>& specs,
                                             const std::vector<Instruction>& prompts);

/// The composition with the spec of `removed` left out.
Image partial_target(const Image& clean, const std::vector<SeededSpec>& specs, DegradationType removed);

struct SelectivityTrial {
  DegradationType prompted = DegradationType::noise;
  DegradationType other = DegradationType::noise;
  double matched_psnr = 0.0;     // matched prompt vs the prompted task's partial target
  double mismatched_psnr = 0.0;  // other prompt vs the same target
  bool success() const { return matched_psnr > mismatched_psnr; }
};

/// Random two-degradation compositions (physical order) over `cleans` with
/// training-range parameters and held-out prompts of `tasks`.
std::vector<SelectivityTrial> selectivity_trials(RestorationNet& model, GuidanceProvider& guidance,
                                                 const std::vector<Image>& cleans,
                                                 const std::vector<DegradationType>& tasks, int n_trials, Rng& rng,
                                                 Split prompt_split = Split::heldout);

struct StabilityReport {
  std::vector<double> psnr;
  std::vector<double> ssim;
  double psnr_mean = 0.0;
  double psnr_std = 0.0;  // population standard deviation
  double ssim_mean = 0.0;
  double ssim_std = 0.0;

  nlohmann::json to_json() const;
};

/// Each repeat re-draws a same-category paraphrase for every pair from `split`.
StabilityReport stability_repeat(RestorationNet& model, GuidanceProvider& guidance, std::vector<ImagePair> pairs,
                                 int n, Rng& rng, Split split = Split::heldout);

/// Owns the data and guidance of a plan and runs its experiments.
class Harness {
 public:
  explicit Harness(ExperimentPlan plan, std::ostream* log = nullptr);
  Harness(ExperimentPlan plan, TextEncoderBundle encoder, std::ostream* log = nullptr);

  const ExperimentPlan& plan() const { return plan_; }
  GuidanceProvider& guidance() { return *guidance_; }
  const std::vector<Image>& train_images() const { return train_images_; }
  const std::vector<Image>& eval_images() const { return eval_images_; }
  const std::vector<EvalColumn>& columns() const { return columns_; }

  /// Trains a fresh model on `tasks` with the plan's train config.
  RestorationNet train_model(const std::vector<DegradationType>& tasks, uint64_t seed, bool sgi_enabled);
  /// Evaluates the columns whose task is in `tasks` ("-" for the rest).
  ResultTable::Row evaluate_row(RestorationNet& model, const std::string& label,
                                const std::vector<DegradationType>& tasks, const std::string& cell_dir = "");
  /// Degraded-input baseline row for the same columns.
  ResultTable::Row input_row();
  /// Deterministic evaluation pairs of one column.
  std::vector<ImagePair> column_pairs(size_t column);

  Report run_all_in_one();
  Report run_single_task();
  Report run_combo_ablation();
  Report run_sgi_ablation();
  Report run_confirmatory();
  Report run_stability();

  /// Runs the plan's experiments and writes `<output_dir>/<experiment>.json|.txt`.
  std::vector<Report> run();

 private:
  Report make_report(const std::string& experiment) const;
  void write_report(const Report& report) const;
  ResultTable empty_table(const std::string& title) const;
  RestorationNet model_for(const std::vector<DegradationType>& tasks, uint64_t seed, bool sgi_enabled);

  ExperimentPlan plan_;
  std::ostream* log_;
  std::unique_ptr<GuidanceProvider> guidance_;
  std::vector<Image> train_images_;
  std::vector<Image> eval_images_;
  std::vector<EvalColumn> columns_;
  std::map<std::string, RestorationNet> model_cache_;
};

/// All non-empty subsets of `tasks`, by size then lexicographically.
std::vector<std::vector<DegradationType>> task_subsets(const std::vector<DegradationType>& tasks);

}  // namespace promptrestore
