#include "sml/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sml/errors.hpp"
#include "sml/hsi.hpp"
#include "sml/hvp.hpp"
#include "sml/kde.hpp"
#include "sml/landscape.hpp"
#include "sml/manifest.hpp"
#include "sml/model.hpp"
#include "sml/parallel.hpp"
#include "sml/ppm.hpp"
#include "sml/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sml {
namespace {

class Timer {
public:
    Timer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& flag) {
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        std::size_t comma = s.find(',', pos);
        std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (tok.empty()) throw ArgumentError(flag + ": empty element in list '" + s + "'");
        try {
            long long v = std::stoll(tok);
            if (v <= 0) throw std::invalid_argument("");
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ArgumentError(flag + ": bad integer '" + tok + "'");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw ArgumentError(flag + ": empty list");
    return out;
}

std::vector<double> parse_double_list(const std::string& s, const std::string& flag) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        std::size_t comma = s.find(',', pos);
        std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (tok.empty()) throw ArgumentError(flag + ": empty element in list '" + s + "'");
        try {
            out.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw ArgumentError(flag + ": bad number '" + tok + "'");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw ArgumentError(flag + ": empty list");
    return out;
}

void ensure_out_dir(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw DataError("cannot create output directory " + out + ": " + ec.message());
}

void add_output(RunManifest& m, const std::string& path) {
    m.outputs.emplace_back(path, git_blob_sha1(path));
}

// closes before returning, so the bytes are on disk when add_output hashes them
void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path);
    os << content;
    if (!os) throw DataError("write failed: " + path);
}

void finish_manifest(RunManifest& m, const std::string& out, const Timer& timer) {
    m.wall_seconds = timer.seconds();
    write_manifest(out + "/manifest.json", m);
}

// ---- config file expansion -------------------------------------------------
// `--config file.json` mirrors the subcommand's flags; values from the file
// are injected right after the subcommand token so explicit flags (parsed
// with a take-last policy) override them.

std::string json_scalar_to_token(const json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean() || v.is_number()) return v.dump();
    if (v.is_array()) {
        std::string joined;
        for (const auto& e : v) {
            if (!e.is_number()) throw FormatError("config key '" + key + "': arrays must be numeric");
            if (!joined.empty()) joined += ",";
            joined += e.dump();
        }
        return joined;
    }
    throw FormatError("config key '" + key + "' has unsupported type");
}

std::vector<std::string> expand_config_args(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    std::string config_path;
    for (std::size_t i = 1; i < args.size();) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw ArgumentError("--config needs a file path");
            config_path = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                       args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
        } else if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
        } else {
            ++i;
        }
    }
    if (config_path.empty()) return args;
    if (args.size() < 2) throw ArgumentError("--config requires a subcommand");

    std::ifstream is(config_path);
    if (!is) throw DataError("cannot open config: " + config_path);
    json cfg;
    try {
        cfg = json::parse(is);
    } catch (const json::exception& e) {
        throw FormatError("bad config json: " + std::string(e.what()));
    }
    if (!cfg.is_object()) throw FormatError("config must be a json object of flag values");

    std::vector<std::string> injected;
    for (const auto& [key, value] : cfg.items()) {
        if (key == "config") throw FormatError("config files cannot nest --config");
        if (value.is_boolean()) {
            if (value.get<bool>()) injected.push_back("--" + key);
            continue;
        }
        injected.push_back("--" + key);
        injected.push_back(json_scalar_to_token(value, key));
    }
    // program name, subcommand, config-derived flags, then user flags
    std::vector<std::string> out;
    out.push_back(args[0]);
    out.push_back(args[1]);
    out.insert(out.end(), injected.begin(), injected.end());
    out.insert(out.end(), args.begin() + 2, args.end());
    return out;
}

// ---- flag bundles ----------------------------------------------------------

struct DataFlags {
    std::string cube;
    std::string gt;
    bool normalize = false;
};

struct ModelFlags {
    std::string mixer = "ssa";
    std::string depths = "1,1,1,1";
    std::string channels = "8,8,8,8";
    std::size_t patch = 5;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;

    ModelSpec to_spec(std::size_t bands, std::size_t classes) const {
        ModelSpec spec;
        spec.mixer = parse_mixer_kind(mixer);
        spec.stage_depths = parse_size_list(depths, "--depths");
        spec.stage_channels = parse_size_list(channels, "--channels");
        spec.patch_size = patch;
        spec.bands = bands;
        spec.classes = classes;
        spec.heads = heads;
        spec.mlp_ratio = mlp_ratio;
        spec.validate();
        return spec;
    }
};

struct TrainFlags {
    double train_frac = 0.05;
    double val_frac = 0.05;
    std::size_t seeds = 1;
    std::uint64_t seed = 0;
    std::size_t epochs = 300;
    std::size_t batch = 64;
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0001;
    double alpha = 0.1;
    bool best_val = false;
    bool fixed_split = false;

    TrainConfig to_config(std::uint64_t run_seed) const {
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.lr = lr;
        cfg.momentum = momentum;
        cfg.weight_decay = weight_decay;
        cfg.alpha = alpha;
        cfg.seed = run_seed;
        cfg.best_val = best_val;
        return cfg;
    }
};

void register_model_flags(CLI::App* sub, ModelFlags& mf) {
    sub->add_option("--mixer", mf.mixer, "mixer kind: cnn|ssa|csa|ssa-cnn|csa-cnn");
    sub->add_option("--depths", mf.depths, "blocks per stage, comma-separated");
    sub->add_option("--channels", mf.channels, "width per stage, comma-separated");
    sub->add_option("--patch", mf.patch, "patch window size (odd)");
    sub->add_option("--heads", mf.heads, "attention heads");
    sub->add_option("--mlp-ratio", mf.mlp_ratio, "mlp hidden width multiplier");
}

void register_train_flags(CLI::App* sub, TrainFlags& tf) {
    sub->add_option("--train-frac", tf.train_frac, "per-class training fraction");
    sub->add_option("--val-frac", tf.val_frac, "per-class validation fraction");
    sub->add_option("--seeds", tf.seeds, "number of independent runs");
    sub->add_option("--seed", tf.seed, "base seed");
    sub->add_option("--epochs", tf.epochs, "training epochs");
    sub->add_option("--batch", tf.batch, "batch size");
    sub->add_option("--lr", tf.lr, "learning rate");
    sub->add_option("--momentum", tf.momentum, "sgd momentum");
    sub->add_option("--wd", tf.weight_decay, "weight decay");
    sub->add_option("--alpha", tf.alpha, "label smoothing");
    sub->add_flag("--best-val", tf.best_val, "keep max-val-OA epoch instead of the final one");
    sub->add_flag("--fixed-split", tf.fixed_split, "reuse the base seed's split for every run");
}

// ---- checkpoint sidecar ------------------------------------------------------

struct Sidecar {
    ModelSpec spec;
    std::uint64_t init_seed = 0;
    std::string cube_path;
    std::string gt_path;
    bool normalize = false;
    double train_frac = 0;
    double val_frac = 0;
    std::uint64_t split_seed = 0;
    double alpha = 0.1;
    double weight_decay = 0.0001;
};

json sidecar_to_json(const Sidecar& sc) {
    return json{{"model", spec_to_json(sc.spec)},
                {"init_seed", sc.init_seed},
                {"data",
                 {{"cube", sc.cube_path},
                  {"gt", sc.gt_path},
                  {"normalize", sc.normalize},
                  {"train_frac", sc.train_frac},
                  {"val_frac", sc.val_frac},
                  {"split_seed", sc.split_seed}}},
                {"loss", {{"alpha", sc.alpha}, {"weight_decay", sc.weight_decay}}}};
}

Sidecar load_sidecar(const std::string& checkpoint_path) {
    std::string path = checkpoint_path + ".json";
    std::ifstream is(path);
    if (!is) throw DataError("cannot open checkpoint sidecar: " + path);
    json j;
    try {
        j = json::parse(is);
        Sidecar sc;
        sc.spec = spec_from_json(j.at("model"));
        sc.init_seed = j.at("init_seed").get<std::uint64_t>();
        const json& d = j.at("data");
        sc.cube_path = d.at("cube").get<std::string>();
        sc.gt_path = d.at("gt").get<std::string>();
        sc.normalize = d.at("normalize").get<bool>();
        sc.train_frac = d.at("train_frac").get<double>();
        sc.val_frac = d.at("val_frac").get<double>();
        sc.split_seed = d.at("split_seed").get<std::uint64_t>();
        const json& l = j.at("loss");
        sc.alpha = l.at("alpha").get<double>();
        sc.weight_decay = l.at("weight_decay").get<double>();
        return sc;
    } catch (const json::exception& e) {
        throw FormatError("bad checkpoint sidecar " + path + ": " + e.what());
    }
}

// Rebuild everything a diagnostic needs from a checkpoint: the model with the
// stored weights plus the same data split the training run used.
template <typename T>
struct RestoredRun {
    SpectralNet<T> model;
    HsiCube cube;
    SplitResult split;
    Sidecar sidecar;
};

template <typename T>
RestoredRun<T> restore_run(const std::string& checkpoint, const std::string& cube_override,
                           const std::string& gt_override) {
    Sidecar sc = load_sidecar(checkpoint);
    std::string cube_path = cube_override.empty() ? sc.cube_path : cube_override;
    std::string gt_path = gt_override.empty() ? sc.gt_path : gt_override;
    HsiCube cube = load_cube(cube_path, sc.normalize);
    GroundTruth gt = load_labels(gt_path);
    if (cube.height != gt.height || cube.width != gt.width)
        throw DataError("cube and ground truth dimensions disagree");
    if (cube.bands != sc.spec.bands || gt.classes != sc.spec.classes)
        throw DataError("checkpoint was trained for a different cube/label layout");
    SpectralNet<T> model(sc.spec, sc.init_seed);
    load_weights_into(model.params(), checkpoint);
    SplitResult split = stratified_split(gt, sc.train_frac, sc.val_frac, sc.split_seed);
    return RestoredRun<T>{std::move(model), std::move(cube), std::move(split), std::move(sc)};
}

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v);
    double acc = 0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

// ---- commands ---------------------------------------------------------------

struct SynthFlags {
    std::size_t classes = 4;
    std::size_t bands = 16;
    std::size_t size = 48;
    double noise = 0.05;
    std::uint64_t seed = 0;
    std::string out = "out";
};

int cmd_synth(const SynthFlags& f) {
    Timer timer;
    ensure_out_dir(f.out);
    auto [cube, gt] = synth_generate(f.classes, f.bands, f.size, f.size, f.noise, f.seed);
    std::string cube_path = f.out + "/cube.hsc";
    std::string gt_path = f.out + "/labels.hsg";
    save_cube(cube, cube_path);
    save_labels(gt, gt_path);
    RunManifest m;
    m.command = "synth-data";
    m.config = json{{"classes", f.classes}, {"bands", f.bands},   {"size", f.size},
                    {"noise", f.noise},     {"seed", f.seed},     {"out", f.out}};
    m.seeds = {f.seed};
    add_output(m, cube_path);
    add_output(m, gt_path);
    finish_manifest(m, f.out, timer);
    std::cout << "wrote " << cube_path << " (" << cube.height << "x" << cube.width << "x"
              << cube.bands << ") and " << gt_path << "\n";
    return 0;
}

template <typename T>
int cmd_train(const DataFlags& df, const ModelFlags& mf, const TrainFlags& tf,
              const std::string& out) {
    Timer timer;
    ensure_out_dir(out);
    HsiCube cube = load_cube(df.cube, df.normalize);
    GroundTruth gt = load_labels(df.gt);
    if (cube.height != gt.height || cube.width != gt.width)
        throw DataError("cube and ground truth dimensions disagree");
    ModelSpec spec = mf.to_spec(cube.bands, gt.classes);

    RunManifest man;
    man.command = "train";
    man.inputs = {df.cube, df.gt};
    man.config = json{{"mixer", mf.mixer},         {"depths", mf.depths},
                      {"channels", mf.channels},   {"patch", mf.patch},
                      {"heads", mf.heads},         {"mlp_ratio", mf.mlp_ratio},
                      {"normalize", df.normalize}, {"train_frac", tf.train_frac},
                      {"val_frac", tf.val_frac},   {"seeds", tf.seeds},
                      {"seed", tf.seed},           {"epochs", tf.epochs},
                      {"batch", tf.batch},         {"lr", tf.lr},
                      {"momentum", tf.momentum},   {"wd", tf.weight_decay},
                      {"alpha", tf.alpha},         {"best_val", tf.best_val},
                      {"fixed_split", tf.fixed_split}};

    json per_seed = json::array();
    std::vector<double> oas, aas, kappas;
    for (std::size_t run = 0; run < tf.seeds; ++run) {
        std::uint64_t run_seed = tf.seed + run;
        std::uint64_t split_seed = tf.fixed_split ? tf.seed : run_seed;
        man.seeds.push_back(run_seed);
        SplitResult split = stratified_split(gt, tf.train_frac, tf.val_frac, split_seed);
        PatchSet tr{&cube, mf.patch, split.train};
        PatchSet va{&cube, mf.patch, split.val};
        PatchSet te{&cube, mf.patch, split.test};

        SpectralNet<T> model(spec, run_seed);
        TrainConfig cfg = tf.to_config(run_seed);
        std::vector<EpochRecord> history = train(model, tr, va, cfg);

        std::string tag = "seed" + std::to_string(run_seed);
        std::string hist_path = out + "/" + tag + "_history.csv";
        write_history_csv(hist_path, history);
        std::string ckpt_path = out + "/" + tag + ".smlw";
        save_weights(ckpt_path, model.params());
        Sidecar sc;
        sc.spec = spec;
        sc.init_seed = run_seed;
        sc.cube_path = df.cube;
        sc.gt_path = df.gt;
        sc.normalize = df.normalize;
        sc.train_frac = tf.train_frac;
        sc.val_frac = tf.val_frac;
        sc.split_seed = split_seed;
        sc.alpha = tf.alpha;
        sc.weight_decay = tf.weight_decay;
        write_text(ckpt_path + ".json", sidecar_to_json(sc).dump(2) + "\n");

        Metrics metrics = evaluate_metrics(model, te);
        json mj = metrics_to_json(metrics, run_seed);
        mj["checkpoint"] = ckpt_path;
        per_seed.push_back(mj);
        oas.push_back(metrics.oa);
        aas.push_back(metrics.aa);
        kappas.push_back(metrics.kappa);
        std::cout << tag << ": test oa " << metrics.oa << " aa " << metrics.aa << " kappa "
                  << metrics.kappa << "\n";

        add_output(man, hist_path);
        add_output(man, ckpt_path);
        add_output(man, ckpt_path + ".json");
    }

    json metrics_json{
        {"per_seed", per_seed},
        {"mean", {{"oa", mean_of(oas)}, {"aa", mean_of(aas)}, {"kappa", mean_of(kappas)}}},
        {"std", {{"oa", sample_std(oas)}, {"aa", sample_std(aas)}, {"kappa", sample_std(kappas)}}}};
    std::string metrics_path = out + "/metrics.json";
    write_text(metrics_path, metrics_json.dump(2) + "\n");
    add_output(man, metrics_path);
    finish_manifest(man, out, timer);
    std::cout << "mean oa " << mean_of(oas) << " (std " << sample_std(oas) << ") over "
              << tf.seeds << " seed(s)\n";
    return 0;
}

template <typename T>
int cmd_eval(const std::string& checkpoint, const DataFlags& df, const std::string& which_split,
             const std::string& out) {
    Timer timer;
    ensure_out_dir(out);
    RestoredRun<T> run = restore_run<T>(checkpoint, df.cube, df.gt);
    std::vector<PatchRecord> records;
    if (which_split == "train")
        records = run.split.train;
    else if (which_split == "val")
        records = run.split.val;
    else if (which_split == "test")
        records = run.split.test;
    else if (which_split == "all") {
        records = run.split.train;
        records.insert(records.end(), run.split.val.begin(), run.split.val.end());
        records.insert(records.end(), run.split.test.begin(), run.split.test.end());
    } else
        throw ArgumentError("--split must be train|val|test|all");
    PatchSet set{&run.cube, run.sidecar.spec.patch_size, std::move(records)};
    Metrics metrics = evaluate_metrics(run.model, set);
    json mj = metrics_to_json(metrics, run.sidecar.init_seed);
    mj["split"] = which_split;
    mj["checkpoint"] = checkpoint;
    std::string path = out + "/eval_metrics.json";
    write_text(path, mj.dump(2) + "\n");

    RunManifest man;
    man.command = "eval";
    man.inputs = {checkpoint};
    man.config = json{{"checkpoint", checkpoint}, {"split", which_split}, {"out", out}};
    man.seeds = {run.sidecar.init_seed};
    add_output(man, path);
    finish_manifest(man, out, timer);
    std::cout << "oa " << metrics.oa << " aa " << metrics.aa << " kappa " << metrics.kappa << "\n";
    return 0;
}

template <typename T>
int cmd_predict_map(const std::string& checkpoint, const DataFlags& df, const std::string& out_file,
                    const std::string& out) {
    Timer timer;
    ensure_out_dir(out);
    RestoredRun<T> run = restore_run<T>(checkpoint, df.cube, df.gt);
    GroundTruth gt = load_labels(df.gt.empty() ? run.sidecar.gt_path : df.gt);

    std::vector<PatchRecord> labeled;
    for (std::size_t r = 0; r < gt.height; ++r)
        for (std::size_t c = 0; c < gt.width; ++c)
            if (gt.at(r, c) != 0) labeled.push_back({r, c, gt.at(r, c)});
    if (labeled.empty()) throw DataError("ground truth has no labeled pixels");
    PatchSet set{&run.cube, run.sidecar.spec.patch_size, labeled};

    std::size_t C = run.sidecar.spec.classes;
    std::vector<std::uint16_t> map(gt.height * gt.width, 0);
    std::size_t batch = 256;
    std::size_t chunks = (labeled.size() + batch - 1) / batch;
    parallel_for(chunks, [&](std::size_t ci) {
        SpectralNet<T> local = run.model;
        local.set_training(false);
        std::size_t lo = ci * batch, hi = std::min(labeled.size(), lo + batch);
        std::vector<std::size_t> which(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) which[i - lo] = i;
        Tensor<T> x = gather_batch(set, which).template cast<T>();
        Tensor<T> logits = local.logits(x);
        for (std::size_t b = 0; b < hi - lo; ++b) {
            std::size_t arg = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (logits.at(b, c) > logits.at(b, arg)) arg = c;
            const PatchRecord& rec = labeled[lo + b];
            map[rec.row * gt.width + rec.col] = static_cast<std::uint16_t>(arg + 1);
        }
    });

    std::string path = out_file.empty() ? out + "/map.ppm" : out_file;
    write_map_ppm(path, gt.height, gt.width, map);
    RunManifest man;
    man.command = "predict-map";
    man.inputs = {checkpoint};
    man.config = json{{"checkpoint", checkpoint}, {"out", path}};
    man.seeds = {run.sidecar.init_seed};
    add_output(man, path);
    finish_manifest(man, out, timer);
    std::cout << "wrote " << path << "\n";
    return 0;
}

template <typename T>
int cmd_landscape(const std::string& checkpoint, std::size_t grid_n, double cap,
                  std::uint64_t seed, std::size_t subset, const std::string& out) {
    Timer timer;
    ensure_out_dir(out);
    RestoredRun<T> run = restore_run<T>(checkpoint, "", "");
    std::vector<PatchRecord> records = run.split.train;
    if (subset > 0 && subset < records.size()) {
        Rng rng(seed);
        rng.shuffle(records);
        records.resize(subset);
    }
    PatchSet data{&run.cube, run.sidecar.spec.patch_size, std::move(records)};

    run.model.set_training(false);
    DirectionPair<T> pair = make_directions(run.model.params(), seed);
    std::vector<T> theta = run.model.params().flatten_trainable();
    EvaluatorFactory<T> factory = model_loss_factory(run.model, data, run.sidecar.alpha,
                                                     run.sidecar.weight_decay);
    LandscapeGrid grid = landscape_grid(theta, pair, grid_n, factory, cap);

    std::string csv_path = out + "/landscape.csv";
    write_grid_csv(csv_path, grid);
    json side{{"seed", seed},
              {"cap", cap},
              {"subset", data.records.size()},
              {"grid", grid_n},
              {"w_values", grid.w_values},
              {"overflow_cells", grid.overflow_cells},
              {"checkpoint", checkpoint}};
    std::string json_path = out + "/landscape.json";
    write_text(json_path, side.dump(2) + "\n");

    RunManifest man;
    man.command = "landscape";
    man.inputs = {checkpoint};
    man.config = json{{"checkpoint", checkpoint}, {"grid", grid_n},   {"cap", cap},
                      {"seed", seed},             {"subset", subset}, {"out", out}};
    man.seeds = {seed};
    add_output(man, csv_path);
    add_output(man, json_path);
    finish_manifest(man, out, timer);
    std::cout << "wrote " << csv_path << " (" << grid_n << "x" << grid_n << ")\n";
    return 0;
}

template <typename T>
int cmd_hessian(const std::string& checkpoint, std::size_t batches, std::size_t batch_size,
                const std::string& bandwidth_flag, std::uint64_t seed, const std::string& out) {
    Timer timer;
    ensure_out_dir(out);
    RestoredRun<T> base = restore_run<T>(checkpoint, "", "");
    base.model.set_training(false);
    const std::vector<PatchRecord>& train_records = base.split.train;
    if (train_records.empty()) throw DataError("checkpoint's training split is empty");
    if (batches < 1) throw ArgumentError("--batches must be >= 1");

    double bandwidth = 0;
    if (bandwidth_flag != "auto") {
        try {
            bandwidth = std::stod(bandwidth_flag);
        } catch (const std::exception&) {
            throw ArgumentError("--bandwidth must be 'auto' or a number");
        }
        if (bandwidth <= 0) throw ArgumentError("--bandwidth must be positive");
    }

    std::vector<double> samples(batches);
    std::vector<char> converged(batches, 0);
    parallel_for(batches, [&](std::size_t b) {
        // private model + batch per sample
        SpectralNet<T> net = base.model;
        net.set_training(false);
        Rng pick(seed * 0x9e3779b97f4a7c15ull + b);
        std::vector<PatchRecord> recs(train_records);
        pick.shuffle(recs);
        recs.resize(std::min(batch_size, recs.size()));
        PatchSet data{&base.cube, base.sidecar.spec.patch_size, std::move(recs)};
        std::vector<std::size_t> which(data.records.size());
        for (std::size_t i = 0; i < which.size(); ++i) which[i] = i;
        Tensor<T> x = gather_batch(data, which).template cast<T>();
        std::vector<std::size_t> labels(data.records.size());
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = data.records[i].label - 1;
        double alpha = base.sidecar.alpha;

        LossGradFn<T> loss_grad = [&](ParameterStore<T>& params, std::vector<T>* grad) -> T {
            Tape<T> tape;
            if (!grad) tape.set_grad_enabled(false);
            Var<T> logits = net.forward(tape, x);
            Var<T> loss = label_smoothing_ce(logits, labels, static_cast<T>(alpha));
            if (grad) {
                tape.backward(loss);
                *grad = net.trainable_grads();
            }
            return loss.value()[0];
        };
        HvpFn<T> hvp = [&](const std::vector<T>& v) {
            return hvp_estimate(net.params(), loss_grad, v);
        };
        Rng power_rng(seed * 0x2545f4914f6cdd1dull + b);
        EigenResult<T> res = top_hessian_eigenvalue(hvp, net.params().trainable_scalar_count(),
                                                    power_rng);
        samples[b] = static_cast<double>(res.lambda_max);
        converged[b] = res.converged ? 1 : 0;
    });

    EigenSampleSet dist = eigen_distribution(samples, bandwidth);
    json curve = json::array();
    for (const auto& p : dist.curve) curve.push_back({p[0], p[1]});
    json j{{"samples", dist.samples},
           {"bandwidth", dist.bandwidth},
           {"curve", curve},
           {"batches", batches},
           {"batch_size", batch_size},
           {"seed", seed},
           {"converged", std::vector<int>(converged.begin(), converged.end())},
           {"checkpoint", checkpoint}};
    std::string path = out + "/hessian.json";
    write_text(path, j.dump(2) + "\n");

    RunManifest man;
    man.command = "hessian";
    man.inputs = {checkpoint};
    man.config = json{{"checkpoint", checkpoint},       {"batches", batches},
                      {"batch_size", batch_size},       {"bandwidth", bandwidth_flag},
                      {"seed", seed},                   {"out", out}};
    man.seeds = {seed};
    add_output(man, path);
    finish_manifest(man, out, timer);
    std::cout << "wrote " << path << " (" << batches << " eigenvalue samples)\n";
    return 0;
}

int cmd_complexity(const ModelFlags& mf, std::size_t bands, std::size_t classes, std::size_t batch,
                   const std::string& out) {
    Timer timer;
    ensure_out_dir(out);
    ModelSpec spec = mf.to_spec(bands, classes);
    ComplexityReport rep = complexity_report(spec, batch);
    json j{{"mixer", mf.mixer},
           {"depths", spec.stage_depths},
           {"channels", spec.stage_channels},
           {"patch", spec.patch_size},
           {"bands", bands},
           {"classes", classes},
           {"batch", batch},
           {"parameter_count", rep.parameter_count},
           {"flops", rep.flops}};
    std::string path = out + "/complexity.json";
    write_text(path, j.dump(2) + "\n");
    RunManifest man;
    man.command = "complexity";
    man.config = j;
    add_output(man, path);
    finish_manifest(man, out, timer);
    std::cout << "parameters " << rep.parameter_count << ", flops " << rep.flops << "\n";
    return 0;
}

// Shared by the two sweeps: retrain from scratch per point, report test OA.
template <typename T>
double sweep_point_oa(const HsiCube& cube, const GroundTruth& gt, const ModelSpec& spec,
                      const TrainFlags& tf, double train_frac, std::uint64_t run_seed) {
    SplitResult split = stratified_split(gt, train_frac, tf.val_frac, run_seed);
    PatchSet tr{&cube, spec.patch_size, split.train};
    PatchSet va{&cube, spec.patch_size, split.val};
    PatchSet te{&cube, spec.patch_size, split.test};
    SpectralNet<T> model(spec, run_seed);
    TrainConfig cfg = tf.to_config(run_seed);
    train(model, tr, va, cfg);
    return evaluate_metrics(model, te).oa;
}

template <typename T>
int cmd_sweep(const std::string& kind, const std::string& list_flag, const DataFlags& df,
              const ModelFlags& mf, const TrainFlags& tf, const std::string& out) {
    Timer timer;
    ensure_out_dir(out);
    HsiCube cube = load_cube(df.cube, df.normalize);
    GroundTruth gt = load_labels(df.gt);
    if (cube.height != gt.height || cube.width != gt.width)
        throw DataError("cube and ground truth dimensions disagree");

    std::vector<double> points;
    if (kind == "patch") {
        for (std::size_t v : parse_size_list(list_flag, "--patches")) points.push_back(static_cast<double>(v));
    } else {
        points = parse_double_list(list_flag, "--fracs");
    }

    std::string csv_path = out + "/sweep_" + kind + ".csv";
    std::ofstream os(csv_path);
    if (!os) throw DataError("cannot open for writing: " + csv_path);
    os.precision(10);
    os << (kind == "patch" ? "patch" : "train_frac") << ",oa_mean,oa_std\n";

    RunManifest man;
    man.command = "sweep-" + kind;
    man.inputs = {df.cube, df.gt};
    man.config = json{{"points", list_flag}, {"seeds", tf.seeds}, {"seed", tf.seed}, {"out", out}};

    for (std::size_t pi = 0; pi < points.size(); ++pi) {
        ModelFlags pmf = mf;
        double train_frac = tf.train_frac;
        if (kind == "patch")
            pmf.patch = static_cast<std::size_t>(points[pi]);
        else
            train_frac = points[pi];
        ModelSpec spec = pmf.to_spec(cube.bands, gt.classes);
        std::vector<double> oas(tf.seeds);
        for (std::size_t run = 0; run < tf.seeds; ++run) {
            std::uint64_t run_seed = tf.seed + pi * 1000 + run;  // per-point seed offset
            man.seeds.push_back(run_seed);
            oas[run] = sweep_point_oa<T>(cube, gt, spec, tf, train_frac, run_seed);
        }
        os << points[pi] << "," << mean_of(oas) << "," << sample_std(oas) << "\n";
        std::cout << (kind == "patch" ? "patch " : "train_frac ") << points[pi] << ": oa "
                  << mean_of(oas) << "\n";
    }
    os.close();
    if (!os) throw DataError("write failed: " + csv_path);
    add_output(man, csv_path);
    finish_manifest(man, out, timer);
    return 0;
}

}  // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"hyperspectral mixer-transformer workbench"};
    app.require_subcommand(1);
    bool verify = false;
    app.add_flag("--verify", verify, "run in 64-bit verify precision");

    // synth-data
    SynthFlags sf;
    CLI::App* synth = app.add_subcommand("synth-data", "generate a synthetic labeled cube");
    synth->add_option("--classes", sf.classes, "number of classes (>= 2)");
    synth->add_option("--bands", sf.bands, "spectral bands");
    synth->add_option("--size", sf.size, "square grid side length");
    synth->add_option("--noise", sf.noise, "per-value gaussian noise sigma");
    synth->add_option("--seed", sf.seed, "generator seed");
    synth->add_option("--out", sf.out, "output directory");

    // train
    DataFlags tr_data;
    ModelFlags tr_model;
    TrainFlags tr_train;
    std::string tr_out = "out";
    CLI::App* tr = app.add_subcommand("train", "train one mixer model over k seeds");
    tr->add_option("--cube", tr_data.cube, "HSC1 cube path")->required();
    tr->add_option("--gt", tr_data.gt, "HSG1 label path")->required();
    tr->add_flag("--normalize", tr_data.normalize, "per-band min-max normalize at load");
    register_model_flags(tr, tr_model);
    register_train_flags(tr, tr_train);
    tr->add_option("--out", tr_out, "output directory");

    // eval
    std::string ev_ckpt, ev_split = "test", ev_out = "out";
    DataFlags ev_data;
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", ev_ckpt, "SMLW checkpoint path")->required();
    ev->add_option("--cube", ev_data.cube, "override cube path");
    ev->add_option("--gt", ev_data.gt, "override label path");
    ev->add_option("--split", ev_split, "train|val|test|all");
    ev->add_option("--out", ev_out, "output directory");

    // predict-map
    std::string pm_ckpt, pm_out_file, pm_out = "out";
    DataFlags pm_data;
    CLI::App* pm = app.add_subcommand("predict-map", "render per-pixel predictions as PPM");
    pm->add_option("--checkpoint", pm_ckpt, "SMLW checkpoint path")->required();
    pm->add_option("--cube", pm_data.cube, "override cube path");
    pm->add_option("--gt", pm_data.gt, "override label path");
    pm->add_option("--map", pm_out_file, "output PPM path (default <out>/map.ppm)");
    pm->add_option("--out", pm_out, "output directory");

    // landscape
    std::string ls_ckpt, ls_out = "out";
    std::size_t ls_grid = 11, ls_subset = 0;
    double ls_cap = 100.0;
    std::uint64_t ls_seed = 0;
    CLI::App* ls = app.add_subcommand("landscape", "disturbance-robustness loss grid");
    ls->add_option("--checkpoint", ls_ckpt, "SMLW checkpoint path")->required();
    ls->add_option("--grid", ls_grid, "points per axis");
    ls->add_option("--cap", ls_cap, "loss saturation threshold");
    ls->add_option("--seed", ls_seed, "direction/subset seed");
    ls->add_option("--subset", ls_subset, "evaluate on k seeded training samples (0 = all)");
    ls->add_option("--out", ls_out, "output directory");

    // hessian
    std::string hs_ckpt, hs_bandwidth = "auto", hs_out = "out";
    std::size_t hs_batches = 16, hs_batch_size = 64;
    std::uint64_t hs_seed = 0;
    CLI::App* hs = app.add_subcommand("hessian", "top Hessian eigenvalue distribution");
    hs->add_option("--checkpoint", hs_ckpt, "SMLW checkpoint path")->required();
    hs->add_option("--batches", hs_batches, "number of mini-batch samples");
    hs->add_option("--batch-size", hs_batch_size, "mini-batch size");
    hs->add_option("--bandwidth", hs_bandwidth, "'auto' (Scott) or a positive number");
    hs->add_option("--seed", hs_seed, "batch/start-vector seed");
    hs->add_option("--out", hs_out, "output directory");

    // complexity
    ModelFlags cx_model;
    std::size_t cx_bands = 144, cx_classes = 15, cx_batch = 1;
    std::string cx_out = "out";
    CLI::App* cx = app.add_subcommand("complexity", "parameter and FLOP accounting");
    register_model_flags(cx, cx_model);
    cx->add_option("--bands", cx_bands, "spectral bands");
    cx->add_option("--classes", cx_classes, "class count");
    cx->add_option("--batch", cx_batch, "batch size for the FLOP figure");
    cx->add_option("--out", cx_out, "output directory");

    // sweep-patch
    DataFlags sp_data;
    ModelFlags sp_model;
    TrainFlags sp_train;
    std::string sp_list = "5,7,9,11,13", sp_out = "out";
    CLI::App* sp = app.add_subcommand("sweep-patch", "test OA across patch sizes");
    sp->add_option("--cube", sp_data.cube, "HSC1 cube path")->required();
    sp->add_option("--gt", sp_data.gt, "HSG1 label path")->required();
    sp->add_flag("--normalize", sp_data.normalize, "per-band min-max normalize at load");
    register_model_flags(sp, sp_model);
    register_train_flags(sp, sp_train);
    sp->add_option("--patches", sp_list, "patch sizes, comma-separated");
    sp->add_option("--out", sp_out, "output directory");

    // sweep-ratio
    DataFlags sr_data;
    ModelFlags sr_model;
    TrainFlags sr_train;
    std::string sr_list = "0.05,0.1,0.2", sr_out = "out";
    CLI::App* sr = app.add_subcommand("sweep-ratio", "test OA across training fractions");
    sr->add_option("--cube", sr_data.cube, "HSC1 cube path")->required();
    sr->add_option("--gt", sr_data.gt, "HSG1 label path")->required();
    sr->add_flag("--normalize", sr_data.normalize, "per-band min-max normalize at load");
    register_model_flags(sr, sr_model);
    register_train_flags(sr, sr_train);
    sr->add_option("--fracs", sr_list, "training fractions, comma-separated");
    sr->add_option("--out", sr_out, "output directory");

    // flags may repeat (config file injection + explicit flags): last one wins
    for (CLI::App* sub : app.get_subcommands({}))
        for (CLI::Option* opt : sub->get_options())
            if (!opt->get_expected_min() || opt->get_expected_max() == 1)
                opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    try {
        std::vector<std::string> args = expand_config_args(argc, argv);
        std::vector<const char*> ptrs;
        ptrs.reserve(args.size());
        for (const auto& a : args) ptrs.push_back(a.c_str());
        app.parse(static_cast<int>(ptrs.size()), ptrs.data());

        if (synth->parsed()) return cmd_synth(sf);
        if (tr->parsed())
            return verify ? cmd_train<double>(tr_data, tr_model, tr_train, tr_out)
                          : cmd_train<float>(tr_data, tr_model, tr_train, tr_out);
        if (ev->parsed())
            return verify ? cmd_eval<double>(ev_ckpt, ev_data, ev_split, ev_out)
                          : cmd_eval<float>(ev_ckpt, ev_data, ev_split, ev_out);
        if (pm->parsed())
            return verify ? cmd_predict_map<double>(pm_ckpt, pm_data, pm_out_file, pm_out)
                          : cmd_predict_map<float>(pm_ckpt, pm_data, pm_out_file, pm_out);
        if (ls->parsed())
            return verify ? cmd_landscape<double>(ls_ckpt, ls_grid, ls_cap, ls_seed, ls_subset, ls_out)
                          : cmd_landscape<float>(ls_ckpt, ls_grid, ls_cap, ls_seed, ls_subset, ls_out);
        if (hs->parsed())
            return verify ? cmd_hessian<double>(hs_ckpt, hs_batches, hs_batch_size, hs_bandwidth,
                                                hs_seed, hs_out)
                          : cmd_hessian<float>(hs_ckpt, hs_batches, hs_batch_size, hs_bandwidth,
                                               hs_seed, hs_out);
        if (cx->parsed()) return cmd_complexity(cx_model, cx_bands, cx_classes, cx_batch, cx_out);
        if (sp->parsed())
            return verify ? cmd_sweep<double>("patch", sp_list, sp_data, sp_model, sp_train, sp_out)
                          : cmd_sweep<float>("patch", sp_list, sp_data, sp_model, sp_train, sp_out);
        if (sr->parsed())
            return verify ? cmd_sweep<double>("ratio", sr_list, sr_data, sr_model, sr_train, sr_out)
                          : cmd_sweep<float>("ratio", sr_list, sr_data, sr_model, sr_train, sr_out);
        std::cerr << "error: no subcommand\n";
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace sml
