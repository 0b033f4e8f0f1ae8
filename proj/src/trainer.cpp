#include "dfseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "dfseg/infer.hpp"

namespace dfseg {

void TrainConfig::validate(const ModelConfig& mc) const {
    if (epochs < 1 || steps_per_epoch < 1 || batch_raw < 1) {
        throw std::invalid_argument("train config: epochs/steps/batch must be positive");
    }
    if (!(lr0 > 0.0) || !(momentum >= 0.0) || !(weight_decay >= 0.0)) {
        throw std::invalid_argument("train config: rates must be positive");
    }
    if (fg_prob < 0.0 || fg_prob > 1.0) {
        throw std::invalid_argument("train config: fg_prob must be in [0,1]");
    }
    if (folds < 1 || fold_id < 0 || fold_id >= folds) {
        throw std::invalid_argument("train config: fold_id must be in [0, folds)");
    }
    if (task != "task1" && task != "task2") {
        throw std::invalid_argument("train config: task must be task1 or task2");
    }
    // the patch must survive the pool schedule
    Dims3 total{1, 1, 1};
    for (const auto& p : mc.pools) {
        for (int a = 0; a < 3; ++a) total[a] *= p[a];
    }
    for (int a = 0; a < 3; ++a) {
        if (patch[a] % total[a] != 0) {
            throw std::invalid_argument(
                "train config: patch dims must be divisible by the cumulative pool strides");
        }
    }
}

void TrainConfig::to_kv(KvConfig& kv) const {
    kv.set("train.epochs", std::to_string(epochs));
    kv.set("train.steps_per_epoch", std::to_string(steps_per_epoch));
    kv.set("train.batch_raw", std::to_string(batch_raw));
    kv.set("train.mixup", mixup ? "1" : "0");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", mixup_alpha);
    kv.set("train.mixup_alpha", buf);
    std::snprintf(buf, sizeof(buf), "%.17g", lr0);
    kv.set("train.lr0", buf);
    std::snprintf(buf, sizeof(buf), "%.17g", momentum);
    kv.set("train.momentum", buf);
    std::snprintf(buf, sizeof(buf), "%.17g", weight_decay);
    kv.set("train.weight_decay", buf);
    kv.set("train.patch", std::to_string(patch[0]) + "," + std::to_string(patch[1]) + "," +
                              std::to_string(patch[2]));
    std::snprintf(buf, sizeof(buf), "%.17g", fg_prob);
    kv.set("train.fg_prob", buf);
    kv.set("train.flips", flips ? "1" : "0");
    kv.set("train.seed", std::to_string(seed));
    kv.set("train.folds", std::to_string(folds));
    kv.set("train.fold_id", std::to_string(fold_id));
    kv.set("train.val_every", std::to_string(val_every));
    std::snprintf(buf, sizeof(buf), "%.17g", early_stop_dice);
    kv.set("train.early_stop_dice", buf);
    kv.set("train.task", task);
}

TrainConfig TrainConfig::from_kv(const KvConfig& kv) {
    TrainConfig c;
    c.epochs = static_cast<int>(kv.get_int("train.epochs", c.epochs));
    c.steps_per_epoch = static_cast<int>(kv.get_int("train.steps_per_epoch", c.steps_per_epoch));
    c.batch_raw = static_cast<int>(kv.get_int("train.batch_raw", c.batch_raw));
    c.mixup = kv.get_int("train.mixup", 0) != 0;
    c.mixup_alpha = kv.get_double("train.mixup_alpha", c.mixup_alpha);
    c.lr0 = kv.get_double("train.lr0", c.lr0);
    c.momentum = kv.get_double("train.momentum", c.momentum);
    c.weight_decay = kv.get_double("train.weight_decay", c.weight_decay);
    if (kv.has("train.patch")) {
        auto parts = split(kv.get("train.patch"), ',');
        if (parts.size() != 3) throw std::invalid_argument("train.patch: expected z,y,x");
        c.patch = {std::stoi(parts[0]), std::stoi(parts[1]), std::stoi(parts[2])};
    }
    c.fg_prob = kv.get_double("train.fg_prob", c.fg_prob);
    c.flips = kv.get_int("train.flips", 1) != 0;
    c.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", 0));
    c.folds = static_cast<int>(kv.get_int("train.folds", c.folds));
    c.fold_id = static_cast<int>(kv.get_int("train.fold_id", c.fold_id));
    c.val_every = static_cast<int>(kv.get_int("train.val_every", c.val_every));
    c.early_stop_dice = kv.get_double("train.early_stop_dice", c.early_stop_dice);
    c.task = kv.get_or("train.task", c.task);
    return c;
}

std::vector<const Volume*> TrainCase::channel_ptrs() const {
    std::vector<const Volume*> out;
    for (const auto& v : channels) out.push_back(&v);
    return out;
}

std::vector<std::string> list_case_dirs(const std::string& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw std::runtime_error("not a directory: " + root);
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory()) dirs.push_back(e.path().filename().string());
    }
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

TrainCase load_case_dir(const std::string& dir, const std::string& task, int channels,
                        bool require_labels) {
    namespace fs = std::filesystem;
    TrainCase c;
    c.id = fs::path(dir).filename().string();
    if (task == "task1") {
        if (channels != 1) throw std::invalid_argument("task1 cases provide 1 channel");
        c.channels.push_back(read_volume(dir + "/preRT.dfsv"));
    } else {
        c.channels.push_back(read_volume(dir + "/midRT.dfsv"));
        if (channels == 3) {
            c.channels.push_back(read_volume(dir + "/preRT_reg.dfsv"));
            LabelMap mask = read_labels(dir + "/preRT_reg_mask.dfsv");
            Volume maskf;
            maskf.dims = mask.dims;
            maskf.spacing = mask.spacing;
            maskf.vox.assign(mask.vox.begin(), mask.vox.end());
            c.channels.push_back(std::move(maskf));
        } else if (channels != 1) {
            throw std::invalid_argument("task2 cases provide 1 or 3 channels");
        }
    }
    for (const auto& ch : c.channels) {
        if (ch.dims != c.channels[0].dims) {
            throw std::runtime_error("case '" + c.id + "': channel dims disagree");
        }
    }
    std::string label_path = dir + "/label.dfsv";
    if (fs::exists(label_path)) {
        c.labels = read_labels(label_path);
        if (c.labels.dims != c.channels[0].dims) {
            throw std::runtime_error("case '" + c.id + "': label dims disagree with image");
        }
        c.has_labels = true;
        c.fg = foreground_indices(c.labels);
    } else if (require_labels) {
        throw std::runtime_error("case '" + c.id + "': missing label.dfsv");
    }
    std::string geo_path = dir + "/geometry.txt";
    if (fs::exists(geo_path)) {
        c.geo = GeometryLog::from_kv(KvConfig::load(geo_path));
        c.has_geo = true;
    }
    return c;
}

std::vector<TrainCase> load_dataset(const std::string& root, const std::string& task,
                                    int channels, bool require_labels) {
    std::vector<TrainCase> out;
    for (const auto& name : list_case_dirs(root)) {
        out.push_back(load_case_dir(root + "/" + name, task, channels, require_labels));
    }
    if (out.empty()) throw std::runtime_error("no case directories under " + root);
    return out;
}

double lr_schedule(int epoch, int epochs, double lr0) {
    if (epoch < 0 || epoch >= epochs) throw std::invalid_argument("lr_schedule: epoch out of range");
    return lr0 * std::pow(1.0 - static_cast<double>(epoch) / epochs, 0.9);
}

Sgd::Sgd(ParamStore& params) : params_(params) {
    for (const auto& name : params_.names()) {
        velocity_.emplace_back(params_.at(name)->values.size(), 0.0);
    }
}

bool Sgd::step(double lr, double momentum, double weight_decay) {
    const auto& names = params_.names();
    // validate the whole step before mutating anything: non-finite gradients
    // or an overflowing update abort with parameters untouched
    for (std::size_t k = 0; k < names.size(); ++k) {
        auto t = params_.at(names[k]);
        if (t->grad.size() != t->values.size()) t->ensure_grad();
        const auto& vel = velocity_[k];
        for (std::size_t i = 0; i < t->values.size(); ++i) {
            if (!std::isfinite(t->grad[i])) return false;
            double v = momentum * vel[i] + (t->grad[i] + weight_decay * t->values[i]);
            if (!std::isfinite(v) || !std::isfinite(t->values[i] - lr * v)) return false;
        }
    }
    for (std::size_t k = 0; k < names.size(); ++k) {
        auto t = params_.at(names[k]);
        auto& vel = velocity_[k];
        for (std::size_t i = 0; i < t->values.size(); ++i) {
            double v = momentum * vel[i] + (t->grad[i] + weight_decay * t->values[i]);
            v = static_cast<double>(static_cast<float>(v));
            double w = t->values[i] - lr * v;
            vel[i] = v;
            t->values[i] = static_cast<double>(static_cast<float>(w));
        }
    }
    return true;
}

namespace {

TensorPtr patches_to_tensor(const std::vector<Patch>& batch) {
    const Dims3 d = batch[0].dims;
    const int C = static_cast<int>(batch[0].channels.size());
    const std::int64_t V = voxel_count(d);
    auto t = Tensor::zeros({static_cast<int>(batch.size()), C, d[0], d[1], d[2]});
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (int c = 0; c < C; ++c) {
            std::copy(batch[b].channels[c].begin(), batch[b].channels[c].end(),
                      t->values.begin() + (static_cast<std::int64_t>(b) * C + c) * V);
        }
    }
    return t;
}

TensorPtr mixes_to_tensor(const std::vector<MixUpSample>& batch) {
    const Dims3 d = batch[0].dims;
    const int C = static_cast<int>(batch[0].channels.size());
    const std::int64_t V = voxel_count(d);
    auto t = Tensor::zeros({static_cast<int>(batch.size()), C, d[0], d[1], d[2]});
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (int c = 0; c < C; ++c) {
            std::copy(batch[b].channels[c].begin(), batch[b].channels[c].end(),
                      t->values.begin() + (static_cast<std::int64_t>(b) * C + c) * V);
        }
    }
    return t;
}

TensorPtr mix_targets_to_tensor(const std::vector<MixUpSample>& batch, int num_classes) {
    const Dims3 d = batch[0].dims;
    const std::int64_t V = voxel_count(d);
    auto t = Tensor::zeros({static_cast<int>(batch.size()), num_classes, d[0], d[1], d[2]});
    for (std::size_t b = 0; b < batch.size(); ++b) {
        std::copy(batch[b].soft_labels.begin(), batch[b].soft_labels.end(),
                  t->values.begin() + static_cast<std::int64_t>(b) * num_classes * V);
    }
    return t;
}

Patch draw_patch(const std::vector<const TrainCase*>& cases, const TrainConfig& cfg, Rng& rng) {
    const TrainCase* tc = cases[rng.uniform_index(cases.size())];
    Patch p = sample_patch(tc->channel_ptrs(), tc->labels, cfg.patch, cfg.fg_prob, rng, &tc->fg);
    if (cfg.flips) random_flip(p, {true, true, true}, rng);
    return p;
}

}  // namespace

EpochMetrics train_epoch(Model& model, const std::vector<const TrainCase*>& cases,
                         const TrainConfig& cfg, double lr, Rng& rng, Sgd& sgd) {
    if (cases.empty()) throw std::invalid_argument("train_epoch: no training cases");
    const int num_classes = model.config().num_classes;
    EpochMetrics m;
    for (int step = 0; step < cfg.steps_per_epoch; ++step) {
        std::vector<Patch> raw;
        for (int b = 0; b < cfg.batch_raw; ++b) raw.push_back(draw_patch(cases, cfg, rng));
        std::vector<MixUpSample> mixed;
        if (cfg.mixup) {
            for (int b = 0; b < cfg.batch_raw; ++b) {
                Patch fresh = draw_patch(cases, cfg, rng);
                MixUpSample s = mixup(raw[b], fresh, num_classes, cfg.mixup_alpha, rng);
                s.source_i = b;                  // raw pair member
                s.source_j = cfg.batch_raw + b;  // fresh draw of this step
                mixed.push_back(std::move(s));
            }
        }

        auto input = patches_to_tensor(raw);
        auto logits = model.forward_any(input);
        std::vector<std::uint8_t> labels;
        for (const auto& p : raw) labels.insert(labels.end(), p.labels.begin(), p.labels.end());
        std::vector<std::vector<int>> level_shapes;
        for (const auto& l : logits) level_shapes.push_back(l->shape);
        auto pyramid = build_label_pyramid(labels, static_cast<int>(raw.size()), cfg.patch,
                                           num_classes, level_shapes);
        auto loss_raw = deep_supervised_loss(logits, pyramid);
        TensorPtr total = loss_raw;
        TensorPtr loss_mix;
        if (cfg.mixup) {
            auto mix_in = mixes_to_tensor(mixed);
            auto mix_logits = model.forward_any(mix_in);
            auto mix_target = mix_targets_to_tensor(mixed, num_classes);
            loss_mix = mixup_loss(mix_logits[0], mix_target);
            total = add(loss_raw, loss_mix);
        }

        model.params().zero_grad();
        backward(total);
        if (!sgd.step(lr, cfg.momentum, cfg.weight_decay)) {
            ++m.nan_steps;
        }
        m.loss_raw += loss_raw->values[0];
        if (loss_mix) m.loss_mixup += loss_mix->values[0];
    }
    m.loss_raw /= cfg.steps_per_epoch;
    m.loss_mixup /= cfg.steps_per_epoch;
    return m;
}

double validate_cases(const Model& model, const std::vector<const TrainCase*>& cases,
                      Dims3 patch) {
    if (cases.empty()) throw std::invalid_argument("validate_cases: no cases");
    std::vector<LabelMap> preds;
    preds.reserve(cases.size());
    std::vector<std::string> ids;
    for (const TrainCase* tc : cases) {
        ProbMap p = sliding_window(model, tc->channel_ptrs(), patch, 0.5);
        preds.push_back(ensemble({&p}, tc->labels.spacing));
        ids.push_back(tc->id);
    }
    std::vector<std::pair<const LabelMap*, const LabelMap*>> pairs;
    for (std::size_t i = 0; i < preds.size(); ++i) pairs.push_back({&preds[i], &cases[i]->labels});
    return aggregated_dsc(pairs, ids, model.config().num_classes).mean_aggregated;
}

TrainResult train_loop(Model& model, const std::vector<const TrainCase*>& train,
                       const std::vector<const TrainCase*>& val, const TrainConfig& cfg,
                       const KvConfig& run_config, const std::string& ckpt_prefix,
                       const TrainerState* resume, int max_epochs_this_run) {
    TrainResult res;
    Sgd sgd(model.params());
    Rng rng = Rng(cfg.seed).fork(1000 + static_cast<std::uint64_t>(cfg.fold_id));
    int start_epoch = 0;
    if (resume && resume->present) {
        if (resume->velocity.size() != sgd.velocity().size()) {
            throw std::invalid_argument("train_loop: resume state does not match the model");
        }
        sgd.velocity() = resume->velocity;
        rng.restore_state(resume->rng);
        start_epoch = static_cast<int>(resume->epoch);
        res.best_val = resume->best_metric;
    }
    int end_epoch = cfg.epochs;
    if (max_epochs_this_run > 0) {
        end_epoch = std::min(end_epoch, start_epoch + max_epochs_this_run);
    }

    char line[256];
    for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
        double lr = lr_schedule(epoch, cfg.epochs, cfg.lr0);
        EpochMetrics m = train_epoch(model, train, cfg, lr, rng, sgd);
        res.epochs_run = epoch + 1;

        bool do_val = !val.empty() &&
                      ((epoch + 1) % std::max(1, cfg.val_every) == 0 || epoch + 1 == cfg.epochs);
        double val_dsc = -1.0;
        if (do_val) {
            val_dsc = validate_cases(model, val, cfg.patch);
            if (val_dsc > res.best_val) {
                res.best_val = val_dsc;
                res.best_epoch = epoch;
                if (!ckpt_prefix.empty()) {
                    res.best_path = ckpt_prefix + "_best.ckpt";
                    save_checkpoint(res.best_path, model, run_config, nullptr);
                }
            }
        }
        if (do_val) {
            std::snprintf(line, sizeof(line),
                          "epoch %d lr %.8f loss_raw %.6f loss_mixup %.6f nan_steps %d val_dsc %.6f",
                          epoch, lr, m.loss_raw, m.loss_mixup, m.nan_steps, val_dsc);
        } else {
            std::snprintf(line, sizeof(line),
                          "epoch %d lr %.8f loss_raw %.6f loss_mixup %.6f nan_steps %d", epoch, lr,
                          m.loss_raw, m.loss_mixup, m.nan_steps);
        }
        res.log_lines.push_back(line);
        if (cfg.early_stop_dice > 0.0 && do_val && val_dsc >= cfg.early_stop_dice) break;
    }

    if (!ckpt_prefix.empty()) {
        TrainerState st;
        st.present = true;
        st.epoch = static_cast<std::uint32_t>(res.epochs_run);
        st.best_metric = res.best_val;
        st.rng = rng.save_state();
        st.velocity = sgd.velocity();
        res.last_path = ckpt_prefix + "_last.ckpt";
        save_checkpoint(res.last_path, model, run_config, &st);
        if (res.best_path.empty()) {
            // no validation ran; the last state doubles as best
            res.best_path = ckpt_prefix + "_best.ckpt";
            save_checkpoint(res.best_path, model, run_config, nullptr);
        }
    }
    return res;
}

std::vector<std::vector<int>> fold_assignment(int n_cases, int folds, std::uint64_t seed) {
    std::vector<int> order(n_cases);
    for (int i = 0; i < n_cases; ++i) order[i] = i;
    Rng rng = Rng(seed).fork(0xF01Dull);
    for (int i = n_cases - 1; i > 0; --i) {
        int j = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(i) + 1));
        std::swap(order[i], order[j]);
    }
    std::vector<std::vector<int>> out(folds);
    for (int i = 0; i < n_cases; ++i) out[i % folds].push_back(order[i]);
    return out;
}

KvConfig make_run_config(const TrainConfig& cfg, const ModelConfig& mc) {
    KvConfig kv = KvConfig::parse(mc.canonical());
    cfg.to_kv(kv);
    return kv;
}

FoldResult run_fold(const std::vector<TrainCase>& dataset, const TrainConfig& cfg,
                    const ModelConfig& mc, const std::string& out_dir) {
    cfg.validate(mc);
    auto folds = fold_assignment(static_cast<int>(dataset.size()), cfg.folds, cfg.seed);
    FoldResult fr;
    fr.val_indices = folds[cfg.fold_id];
    for (int f = 0; f < cfg.folds; ++f) {
        if (f == cfg.fold_id) continue;
        fr.train_indices.insert(fr.train_indices.end(), folds[f].begin(), folds[f].end());
    }
    std::sort(fr.train_indices.begin(), fr.train_indices.end());
    std::sort(fr.val_indices.begin(), fr.val_indices.end());
    if (fr.val_indices.empty() || fr.train_indices.empty()) {
        throw std::runtime_error("run_fold: fold " + std::to_string(cfg.fold_id) +
                                 " leaves an empty train or validation split");
    }
    std::vector<const TrainCase*> train, val;
    for (int i : fr.train_indices) train.push_back(&dataset[static_cast<std::size_t>(i)]);
    for (int i : fr.val_indices) val.push_back(&dataset[static_cast<std::size_t>(i)]);
    for (const auto* c : train) {
        if (!c->has_labels) throw std::runtime_error("run_fold: case without labels");
    }

    Model model(mc);
    init_parameters(model, cfg.seed);
    if (!cfg.pretrained.empty()) load_pretrained(model, cfg.pretrained);

    std::filesystem::create_directories(out_dir);
    KvConfig run_config = make_run_config(cfg, mc);
    std::string prefix = out_dir + "/fold_" + std::to_string(cfg.fold_id);
    fr.train = train_loop(model, train, val, cfg, run_config, prefix);

    std::string log;
    for (const auto& l : fr.train.log_lines) log += l + "\n";
    write_file_text(prefix + "_log.txt", log);
    return fr;
}

}  // namespace dfseg
