#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dfseg/augment.hpp"
#include "dfseg/loss.hpp"
#include "dfseg/model.hpp"
#include "dfseg/preprocess.hpp"
#include "dfseg/rng.hpp"
#include "dfseg/volume.hpp"

namespace dfseg {

struct TrainConfig {
    int epochs = 1000;
    int steps_per_epoch = 50;
    int batch_raw = 2;          // raw patches per step; MixUp adds as many again
    bool mixup = false;
    double mixup_alpha = 0.2;
    double lr0 = 0.01;
    double momentum = 0.99;
    double weight_decay = 3e-5;
    Dims3 patch{56, 224, 160};
    double fg_prob = 1.0 / 3.0;
    bool flips = true;
    std::uint64_t seed = 0;
    int folds = 5;
    int fold_id = 0;
    int val_every = 10;
    double early_stop_dice = -1.0;  // <0 disables
    std::string task = "task1";
    std::string pretrained;  // optional checkpoint for warm start

    void validate(const ModelConfig& mc) const;
    void to_kv(KvConfig& kv) const;
    static TrainConfig from_kv(const KvConfig& kv);
};

// One case held in memory: stacked input channels (primary image first, then
// any prior channels) plus integer labels.
struct TrainCase {
    std::string id;
    std::vector<Volume> channels;
    LabelMap labels;
    bool has_labels = false;
    std::vector<std::int64_t> fg;
    GeometryLog geo;
    bool has_geo = false;

    std::vector<const Volume*> channel_ptrs() const;
};

// task1 -> preRT.dfsv; task2 -> midRT.dfsv [+ preRT_reg.dfsv,
// preRT_reg_mask.dfsv when channels == 3]; labels from label.dfsv.
TrainCase load_case_dir(const std::string& dir, const std::string& task, int channels,
                        bool require_labels);
std::vector<TrainCase> load_dataset(const std::string& root, const std::string& task,
                                    int channels, bool require_labels);
std::vector<std::string> list_case_dirs(const std::string& root);

double lr_schedule(int epoch, int epochs, double lr0);  // lr0 * (1 - e/E)^0.9

// Heavy-ball SGD; parameters and velocities stay f32-representable so a saved
// checkpoint resumes bitwise.
class Sgd {
  public:
    explicit Sgd(ParamStore& params);

    // v <- momentum*v + (g + wd*w); w <- w - lr*v. Aborts (returns false,
    // parameters untouched) when any gradient is not finite.
    bool step(double lr, double momentum, double weight_decay);

    std::vector<std::vector<double>>& velocity() { return velocity_; }

  private:
    ParamStore& params_;
    std::vector<std::vector<double>> velocity_;
};

struct EpochMetrics {
    double loss_raw = 0.0;
    double loss_mixup = 0.0;
    int nan_steps = 0;
};

EpochMetrics train_epoch(Model& model, const std::vector<const TrainCase*>& cases,
                         const TrainConfig& cfg, double lr, Rng& rng, Sgd& sgd);

// Sliding-window prediction of every case, pooled foreground Dice.
double validate_cases(const Model& model, const std::vector<const TrainCase*>& cases,
                      Dims3 patch);

struct TrainResult {
    double best_val = -1.0;
    int best_epoch = -1;
    int epochs_run = 0;
    std::string best_path, last_path;
    std::vector<std::string> log_lines;
};

// Full loop with validation tracking and checkpointing. `ckpt_prefix` empty
// disables checkpoint files; `resume` continues from a loaded trainer state;
// `max_epochs_this_run` interrupts after that many epochs without touching
// the schedule (0 = run to cfg.epochs).
TrainResult train_loop(Model& model, const std::vector<const TrainCase*>& train,
                       const std::vector<const TrainCase*>& val, const TrainConfig& cfg,
                       const KvConfig& run_config, const std::string& ckpt_prefix,
                       const TrainerState* resume = nullptr, int max_epochs_this_run = 0);

// Deterministic shuffle then round-robin split; disjoint and exhaustive.
std::vector<std::vector<int>> fold_assignment(int n_cases, int folds, std::uint64_t seed);

struct FoldResult {
    TrainResult train;
    std::vector<int> train_indices, val_indices;
};

FoldResult run_fold(const std::vector<TrainCase>& dataset, const TrainConfig& cfg,
                    const ModelConfig& mc, const std::string& out_dir);

KvConfig make_run_config(const TrainConfig& cfg, const ModelConfig& mc);

}  // namespace dfseg
