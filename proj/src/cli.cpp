#include "dfseg/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "dfseg/infer.hpp"
#include "dfseg/phantom.hpp"
#include "dfseg/preprocess.hpp"
#include "dfseg/trainer.hpp"

namespace dfseg {
namespace {

namespace fs = std::filesystem;

int cmd_phantom_gen(std::uint64_t seed, int cases, std::vector<int> dims, std::string task,
                    std::string out) {
    if (dims.size() != 3) throw std::runtime_error("--dims expects three values (z y x)");
    auto paths = phantom_gen(seed, cases, {dims[0], dims[1], dims[2]}, task, out);
    std::cout << "wrote " << paths.size() << " cases under " << out << "\n";
    return 0;
}

struct PreprocessArgs {
    std::string in_dir, out_dir, match_ref;
    double threshold = 60.0;
    std::vector<double> spacing{1.2, 0.5, 0.5};
    int close_radius = 3;
    int bins = 1024;
};

void preprocess_case(const std::string& in_dir, const std::string& out_dir,
                     const PreprocessArgs& args, const Volume* match_reference) {
    Spacing3 target{args.spacing[0], args.spacing[1], args.spacing[2]};
    const bool task2 = fs::exists(in_dir + "/midRT.dfsv");
    if (!task2 && !fs::exists(in_dir + "/preRT.dfsv")) {
        throw std::runtime_error("case '" + in_dir + "': no preRT.dfsv or midRT.dfsv");
    }

    std::vector<std::pair<std::string, Volume>> images;  // intensity channels
    if (task2) {
        images.emplace_back("midRT.dfsv", read_volume(in_dir + "/midRT.dfsv"));
        if (fs::exists(in_dir + "/preRT_reg.dfsv")) {
            images.emplace_back("preRT_reg.dfsv", read_volume(in_dir + "/preRT_reg.dfsv"));
        }
    } else {
        images.emplace_back("preRT.dfsv", read_volume(in_dir + "/preRT.dfsv"));
    }

    GeometryLog geo;
    geo.orig_dims = images[0].second.dims;
    geo.orig_spacing = images[0].second.spacing;

    BodyMask mask = body_mask(images[0].second, args.threshold, args.close_radius);
    geo.crop_y0 = mask.y0;
    geo.crop_x0 = mask.x0;

    BodyMask cropped_mask = crop_mask(mask);
    for (auto& [name, img] : images) img = crop_to_mask(img, mask);
    geo.cropped_dims = images[0].second.dims;

    if (match_reference) {
        for (auto& [name, img] : images) {
            img = match_histogram(img, *match_reference, args.bins);
        }
    }
    for (auto& [name, img] : images) img = zscore(img, &cropped_mask);

    Dims3 final_dims{0, 0, 0};
    for (auto& [name, img] : images) {
        img = resample_image(img, target);
        final_dims = img.dims;
    }
    geo.final_dims = final_dims;
    geo.final_spacing = target;

    fs::create_directories(out_dir);
    for (const auto& [name, img] : images) write_volume(out_dir + "/" + name, img);

    auto resample_u8 = [&](const std::string& name) {
        if (!fs::exists(in_dir + "/" + name)) return;
        LabelMap m = read_labels(in_dir + "/" + name);
        m = crop_to_mask(m, mask);
        m = resample_labels_to(m, final_dims, target);
        write_labels(out_dir + "/" + name, m);
    };
    resample_u8("preRT_reg_mask.dfsv");
    resample_u8("label.dfsv");

    geo.to_kv().save(out_dir + "/geometry.txt");
}

int cmd_preprocess(const PreprocessArgs& args) {
    Volume match_ref;
    bool have_ref = false;
    if (!args.match_ref.empty()) {
        match_ref = read_volume(args.match_ref);
        have_ref = true;
    }
    auto cases = list_case_dirs(args.in_dir);
    std::vector<std::string> errors(cases.size());
    parallel_for(static_cast<std::int64_t>(cases.size()), [&](std::int64_t i) {
        try {
            preprocess_case(args.in_dir + "/" + cases[i], args.out_dir + "/" + cases[i], args,
                            have_ref ? &match_ref : nullptr);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });
    for (const auto& e : errors) {
        if (!e.empty()) throw std::runtime_error(e);
    }
    std::cout << "preprocessed " << cases.size() << " cases into " << args.out_dir << "\n";
    return 0;
}

int dataset_channels(const std::string& task, const ModelConfig& mc) {
    if (task == "task1") return 1;
    if (mc.arch == Arch::dualflow) return mc.primary_channels + mc.secondary_channels;
    return mc.in_channels;
}

int cmd_train(const std::string& config_path, int task, const std::string& arch_str, int fold,
              bool mixup_flag, const std::string& pretrained) {
    KvConfig file_cfg = KvConfig::load(config_path);
    TrainConfig tc = TrainConfig::from_kv(file_cfg);
    tc.task = task == 1 ? "task1" : "task2";
    tc.fold_id = fold;
    if (mixup_flag) tc.mixup = true;
    if (!pretrained.empty()) tc.pretrained = pretrained;

    Arch arch = arch_from_name(arch_str);
    ModelConfig mc;
    if (file_cfg.has("model.channels")) {
        KvConfig merged = file_cfg;
        merged.set("model.arch", arch_str);
        mc = ModelConfig::from_kv(merged);
    } else {
        int in_ch = static_cast<int>(file_cfg.get_int("model.in_channels", task == 1 ? 1 : 3));
        mc = ModelConfig::paper_scale(arch, in_ch);
    }
    if (arch == Arch::dualflow && tc.task != "task2") {
        throw std::runtime_error("dualflow runs on task 2 (it consumes the registered prior)");
    }

    std::string data_dir = file_cfg.get("data_dir");
    std::string out_dir = file_cfg.get("out_dir");
    auto dataset = load_dataset(data_dir, tc.task, dataset_channels(tc.task, mc), true);

    FoldResult fr = run_fold(dataset, tc, mc, out_dir);
    std::cout << "fold " << fold << ": trained " << fr.train.epochs_run << " epochs, best val dsc "
              << fr.train.best_val << " at epoch " << fr.train.best_epoch << "\n"
              << "best checkpoint: " << fr.train.best_path << "\n"
              << "last checkpoint: " << fr.train.last_path << "\n";
    return 0;
}

int cmd_infer(const std::vector<std::string>& ckpts, const std::string& in_dir,
              const std::string& out_dir, bool tta) {
    if (ckpts.empty()) throw std::runtime_error("infer: need at least one checkpoint");
    std::vector<LoadedCheckpoint> loaded;
    for (const auto& p : ckpts) loaded.push_back(load_checkpoint(p));

    TrainConfig tc0 = TrainConfig::from_kv(loaded[0].run_config);
    const std::string task = tc0.task;
    const int channels = dataset_channels(task, loaded[0].model->config());
    for (const auto& lc : loaded) {
        TrainConfig t = TrainConfig::from_kv(lc.run_config);
        if (t.task != task ||
            dataset_channels(t.task, lc.model->config()) != channels) {
            throw std::runtime_error("infer: checkpoints disagree on task or input channels");
        }
    }

    fs::create_directories(out_dir);
    auto case_names = list_case_dirs(in_dir);
    for (const auto& name : case_names) {
        TrainCase c = load_case_dir(in_dir + "/" + name, task, channels, false);
        std::vector<ProbMap> maps;
        std::vector<const ProbMap*> map_ptrs;
        for (const auto& lc : loaded) {
            TrainConfig t = TrainConfig::from_kv(lc.run_config);
            ProbMap p = tta ? tta_flips(*lc.model, c.channel_ptrs(), t.patch, 0.5, all_flips())
                            : sliding_window(*lc.model, c.channel_ptrs(), t.patch, 0.5);
            maps.push_back(std::move(p));
        }
        for (const auto& m : maps) map_ptrs.push_back(&m);
        LabelMap pred = ensemble(map_ptrs, c.channels[0].spacing);
        if (c.has_geo) pred = restore_to_original(pred, c.geo);
        write_labels(out_dir + "/" + name + ".dfsv", pred);
    }
    std::cout << "wrote " << case_names.size() << " predictions to " << out_dir << "\n";
    return 0;
}

int cmd_evaluate(const std::string& pred_dir, const std::string& ref_dir,
                 const std::string& report_path) {
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(pred_dir)) {
        if (e.is_regular_file() && e.path().extension() == ".dfsv") {
            ids.push_back(e.path().stem().string());
        }
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw std::runtime_error("evaluate: no .dfsv predictions in " + pred_dir);

    std::vector<LabelMap> preds, refs;
    preds.reserve(ids.size());
    refs.reserve(ids.size());
    for (const auto& id : ids) {
        preds.push_back(read_labels(pred_dir + "/" + id + ".dfsv"));
        std::string flat = ref_dir + "/" + id + ".dfsv";
        std::string nested = ref_dir + "/" + id + "/label.dfsv";
        if (fs::exists(flat)) {
            refs.push_back(read_labels(flat));
        } else if (fs::exists(nested)) {
            refs.push_back(read_labels(nested));
        } else {
            throw std::runtime_error("evaluate: no reference for case '" + id + "'");
        }
    }
    std::vector<std::pair<const LabelMap*, const LabelMap*>> pairs;
    for (std::size_t i = 0; i < ids.size(); ++i) pairs.push_back({&preds[i], &refs[i]});
    EvalReport rep = aggregated_dsc(pairs, ids);
    write_report(report_path, rep);
    std::cout << format_report(rep);
    return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"dfseg: 3D segmentation toolkit (phantom data, preprocessing, training, "
                 "inference, evaluation)"};
    app.require_subcommand(1);

    // phantom-gen
    std::uint64_t pg_seed = 0;
    int pg_cases = 4;
    std::vector<int> pg_dims{24, 48, 48};
    std::string pg_task = "task2", pg_out;
    auto* pg = app.add_subcommand("phantom-gen", "generate a synthetic phantom dataset");
    pg->add_option("--seed", pg_seed, "rng seed");
    pg->add_option("--cases", pg_cases, "number of cases")->check(CLI::PositiveNumber);
    pg->add_option("--dims", pg_dims, "volume dims z y x")->expected(3);
    pg->add_option("--task", pg_task, "task1 or task2")
        ->check(CLI::IsMember({"task1", "task2"}));
    pg->add_option("--out", pg_out, "output dataset directory")->required();

    // preprocess
    PreprocessArgs pp;
    auto* pr = app.add_subcommand("preprocess", "body mask, crop, normalize, resample");
    pr->add_option("--in", pp.in_dir, "input dataset directory")->required();
    pr->add_option("--out", pp.out_dir, "output directory")->required();
    pr->add_option("--threshold", pp.threshold, "body intensity threshold");
    pr->add_option("--spacing", pp.spacing, "target spacing z y x (mm)")->expected(3);
    pr->add_option("--match-ref", pp.match_ref, "histogram-match images to this volume");
    pr->add_option("--close-radius", pp.close_radius, "morphological closing radius");
    pr->add_option("--bins", pp.bins, "histogram bins for matching");

    // train
    std::string tr_config, tr_arch = "basic", tr_pretrained;
    int tr_task = 1, tr_fold = 0;
    bool tr_mixup = false;
    auto* tr = app.add_subcommand("train", "train one cross-validation fold");
    tr->add_option("--task", tr_task, "1 or 2")->check(CLI::IsMember({1, 2}));
    tr->add_option("--arch", tr_arch, "basic or dualflow")
        ->check(CLI::IsMember({"basic", "dualflow"}));
    tr->add_option("--fold", tr_fold, "fold id");
    tr->add_option("--config", tr_config, "flat key=value config file")->required();
    tr->add_flag("--mixup", tr_mixup, "enable MixUp batches");
    tr->add_option("--pretrained", tr_pretrained, "checkpoint for warm start");

    // infer
    std::vector<std::string> in_ckpts;
    std::string in_dir, in_out;
    bool in_tta = false;
    auto* inf = app.add_subcommand("infer", "predict label maps (ensembles checkpoints)");
    inf->add_option("--ckpts", in_ckpts, "checkpoint files")->required()->expected(-1);
    inf->add_option("--in", in_dir, "preprocessed dataset directory")->required();
    inf->add_option("--out", in_out, "prediction output directory")->required();
    inf->add_flag("--tta", in_tta, "flip test-time augmentation");

    // evaluate
    std::string ev_pred, ev_ref, ev_report;
    auto* ev = app.add_subcommand("evaluate", "aggregated Dice of predictions vs references");
    ev->add_option("--pred", ev_pred, "prediction directory")->required();
    ev->add_option("--ref", ev_ref, "reference directory")->required();
    ev->add_option("--report", ev_report, "report file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (pg->parsed()) return cmd_phantom_gen(pg_seed, pg_cases, pg_dims, pg_task, pg_out);
        if (pr->parsed()) return cmd_preprocess(pp);
        if (tr->parsed()) {
            return cmd_train(tr_config, tr_task, tr_arch, tr_fold, tr_mixup, tr_pretrained);
        }
        if (inf->parsed()) return cmd_infer(in_ckpts, in_dir, in_out, in_tta);
        if (ev->parsed()) return cmd_evaluate(ev_pred, ev_ref, ev_report);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace dfseg
