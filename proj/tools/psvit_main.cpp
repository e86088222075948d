// Command-line entry point: dataset generation, training, rollout evaluation,
// representation probing and CSV export, each leaving a manifest with the
// resolved configuration and artifact checksums beside its outputs.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "psvit/checkpoint.hpp"
#include "psvit/dataset.hpp"
#include "psvit/errors.hpp"
#include "psvit/metrics.hpp"
#include "psvit/model.hpp"
#include "psvit/probe.hpp"
#include "psvit/rng.hpp"
#include "psvit/threading.hpp"
#include "psvit/train.hpp"

using nlohmann::json;
using namespace psvit;

namespace {

std::uint64_t fnv1a(const char* p, size_t n) {
    std::uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= std::uint64_t(static_cast<unsigned char>(p[i]));
        h *= 1099511628211ull;
    }
    return h;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

std::string checksum_file(const std::string& path) {
    auto bytes = slurp(path);
    return hex64(fnv1a(bytes.data(), bytes.size()));
}

// metric logs carry wall-clock timings; the manifest checksum drops that
// column so identical reruns produce identical manifests
std::string checksum_csv_no_wall(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read " + path);
    std::string line, canon;
    std::getline(is, line);
    std::int64_t wall_col = -1, col = 0;
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) {
        if (cell.rfind("wall", 0) == 0) wall_col = col;
        ++col;
    }
    canon += line + "\n";
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::int64_t c = 0;
        bool first = true;
        while (std::getline(ls, cell, ',')) {
            if (c++ == wall_col) continue;
            if (!first) canon += ",";
            canon += cell;
            first = false;
        }
        canon += "\n";
    }
    return hex64(fnv1a(canon.data(), canon.size()));
}

void write_manifest(const std::string& path, const json& m) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write " + path);
    os << m.dump(2) << "\n";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw UsageError("config: section '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || it.key() == a;
        if (!ok) throw UsageError("config: unknown key " + where + "." + it.key());
    }
}

model::ModelConfig model_from_json(const json& j) {
    check_keys(j, "model",
               {"image", "channels", "patch", "dim", "heads", "head_dim", "ffn", "layers",
                "local_blocks", "registers", "t_max", "scheme", "pos"});
    model::ModelConfig c;
    auto get = [&](const char* k, std::int64_t& dst) {
        if (j.contains(k)) dst = j.at(k).get<std::int64_t>();
    };
    get("image", c.image);
    get("channels", c.channels);
    get("patch", c.patch);
    get("dim", c.dim);
    get("heads", c.heads);
    get("head_dim", c.head_dim);
    get("ffn", c.ffn);
    get("layers", c.layers);
    get("local_blocks", c.local_blocks);
    get("registers", c.registers);
    get("t_max", c.t_max);
    if (j.contains("scheme")) c.scheme = model::scheme_from(j.at("scheme").get<std::string>());
    if (j.contains("pos")) c.pos = model::pos_from(j.at("pos").get<std::string>());
    return c;
}

train::TrainConfig train_from_json(const json& j) {
    check_keys(j, "train",
               {"batch", "epochs", "lr", "loss", "context", "patience", "seed", "val_horizon",
                "eval_every"});
    train::TrainConfig t;
    if (j.contains("batch")) t.batch = j.at("batch").get<std::int64_t>();
    if (j.contains("epochs")) t.epochs = j.at("epochs").get<std::int64_t>();
    if (j.contains("lr")) t.lr = j.at("lr").get<float>();
    if (j.contains("loss")) t.loss = loss_from(j.at("loss").get<std::string>());
    if (j.contains("context")) t.context = j.at("context").get<std::int64_t>();
    if (j.contains("patience")) t.patience = j.at("patience").get<std::int64_t>();
    if (j.contains("seed")) t.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("val_horizon")) t.val_horizon = j.at("val_horizon").get<std::int64_t>();
    if (j.contains("eval_every")) t.eval_every = j.at("eval_every").get<std::int64_t>();
    return t;
}

json model_to_json(const model::ModelConfig& c) {
    return {{"image", c.image},
            {"channels", c.channels},
            {"patch", c.patch},
            {"dim", c.dim},
            {"heads", c.heads},
            {"head_dim", c.head_dim},
            {"ffn", c.ffn},
            {"layers", c.layers},
            {"local_blocks", c.local_blocks},
            {"registers", c.registers},
            {"t_max", c.t_max},
            {"scheme", model::scheme_name(c.scheme)},
            {"pos", model::pos_name(c.pos)}};
}

json train_to_json(const train::TrainConfig& t) {
    return {{"batch", t.batch},
            {"epochs", t.epochs},
            {"lr", t.lr},
            {"loss", loss_name(t.loss)},
            {"context", t.context},
            {"patience", t.patience},
            {"seed", t.seed},
            {"val_horizon", t.val_horizon},
            {"eval_every", t.eval_every}};
}

data::Dataset subset(const data::Dataset& ds, const std::vector<std::int64_t>& idx) {
    data::Dataset out = ds;
    out.n = std::uint32_t(idx.size());
    out.pixels.clear();
    out.seq_params.clear();
    out.seq_flags.clear();
    for (std::int64_t i : idx) {
        out.pixels.insert(out.pixels.end(), ds.seq_ptr(i), ds.seq_ptr(i) + ds.seq_elems());
        if (!ds.seq_params.empty()) out.seq_params.push_back(ds.seq_params[size_t(i)]);
        if (!ds.seq_flags.empty()) out.seq_flags.push_back(ds.seq_flags[size_t(i)]);
    }
    return out;
}

// ---------------------------------------------------------------- simgen ----

struct SimgenOpts {
    std::string kind, out;
    std::int64_t n = 100, frames = 40, size = 64;
    bool ood = false;
    std::uint64_t seed = 0;
};

int cmd_simgen(const SimgenOpts& o) {
    auto t0 = std::chrono::steady_clock::now();
    auto ds = data::generate_dataset(o.kind, int(o.n), int(o.frames), int(o.size), o.ood, o.seed);
    data::write_dataset(ds, o.out);
    json m = {{"command", "simgen"},
              {"config",
               {{"kind", o.kind},
                {"n", o.n},
                {"frames", o.frames},
                {"size", o.size},
                {"ood", o.ood},
                {"seed", o.seed}}},
              {"seed", o.seed},
              {"outputs",
               {{o.out, checksum_file(o.out)}, {o.out + ".meta", checksum_file(o.out + ".meta")}}},
              {"wall_seconds", seconds_since(t0)}};
    write_manifest(o.out + ".manifest.json", m);
    std::cout << "wrote " << ds.n << " x " << ds.frames << " frames of " << o.kind << " at "
              << ds.width << "px to " << o.out << "\n";
    return 0;
}

// ----------------------------------------------------------------- train ----

struct TrainOpts {
    std::string data, config, out, scheme;
    std::int64_t epochs = -1, context = -1;
    std::int64_t seed = -1;
};

int cmd_train(const TrainOpts& o) {
    auto t0 = std::chrono::steady_clock::now();
    json cj;
    try {
        cj = json::parse(slurp(o.config));
    } catch (const json::parse_error& e) {
        throw UsageError("config: " + std::string(e.what()));
    }
    check_keys(cj, "config", {"model", "train"});
    auto cfg = model_from_json(cj.value("model", json::object()));
    auto tc = train_from_json(cj.value("train", json::object()));
    if (o.epochs >= 0) tc.epochs = o.epochs;
    if (o.context >= 0) tc.context = o.context;
    if (o.seed >= 0) tc.seed = std::uint64_t(o.seed);
    if (!o.scheme.empty()) cfg.scheme = model::scheme_from(o.scheme);
    cfg.validate();

    auto ds = data::read_dataset(o.data);
    std::filesystem::create_directories(o.out);
    std::string csv = o.out + "/metrics.csv";
    std::remove(csv.c_str());

    Rng rng(tc.seed);
    auto ps = model::init_params<float>(cfg, rng);
    std::cout << "training " << param_count(cfg) << " params on " << ds.n << " sequences\n";
    train::TrainHooks hooks;
    hooks.on_epoch = [&](const train::EpochRow& r) {
        train::append_metrics_row(csv, r, tc.val_horizon);
        std::cout << "epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss
                  << " div@" << tc.val_horizon << " " << r.val_divergence << " ("
                  << r.wall_seconds << "s)\n";
    };
    auto res = train::train(cfg, ps, ds, tc, &hooks);

    std::string best = o.out + "/best.ckpt", last = o.out + "/last.ckpt";
    save_checkpoint(best, cfg, res.best_epoch >= 0 ? res.best_params : ps);
    save_checkpoint(last, cfg, ps);

    json m = {{"command", "train"},
              {"config", {{"model", model_to_json(cfg)}, {"train", train_to_json(tc)}}},
              {"seed", tc.seed},
              {"inputs", {{o.data, checksum_file(o.data)}}},
              {"outputs",
               {{csv, checksum_csv_no_wall(csv)},
                {best, checksum_file(best)},
                {last, checksum_file(last)}}},
              {"metrics_checksum_ignores_wall_seconds", true},
              {"result",
               {{"epochs_run", std::int64_t(res.log.size())},
                {"best_epoch", res.best_epoch},
                {"best_divergence", res.best_divergence},
                {"skipped_steps", res.skipped_steps},
                {"aborted_nonfinite", res.aborted_nonfinite}}},
              {"wall_seconds", seconds_since(t0)}};
    write_manifest(o.out + "/manifest.json", m);
    if (res.aborted_nonfinite) {
        std::cerr << "training aborted on a non-finite loss; best checkpoint kept\n";
        return 4;
    }
    std::cout << "best epoch " << res.best_epoch << " divergence@" << tc.val_horizon << " "
              << res.best_divergence << "\n";
    return 0;
}

// ------------------------------------------------------------------ eval ----

struct EvalOpts {
    std::string ckpt, data, out, split = "all";
    std::int64_t context = 12, horizon = 80, frames = 0;
};

int cmd_eval(const EvalOpts& o) {
    auto t0 = std::chrono::steady_clock::now();
    auto ck = load_checkpoint(o.ckpt);
    auto full = data::read_dataset(o.data);
    data::Dataset ds;
    if (o.split == "all") {
        ds = full;
    } else {
        auto sp = data::split_train_val(std::int64_t(full.n));
        ds = subset(full, o.split == "train" ? sp.train : sp.val);
    }
    auto ev = metrics::evaluate_rollout(ck.config, ck.params, ds, o.context, o.horizon);
    std::filesystem::create_directories(o.out);
    std::string curves = o.out + "/curves.csv", base = o.out + "/baselines.csv";
    metrics::write_curves_csv(ev, curves);
    metrics::write_baselines_csv(ev, base);

    json outputs = {{curves, checksum_file(curves)}, {base, checksum_file(base)}};
    if (o.frames > 0) {
        NoGradGuard ng;
        std::int64_t fe = ds.frame_elems();
        auto ctx = TensorT<float>::from(
            {o.context, ds.channels, ds.height, ds.width},
            std::vector<float>(ds.seq_ptr(0), ds.seq_ptr(0) + o.context * fe));
        auto pred = model::rollout(ck.config, ck.params, ctx, o.horizon);
        for (std::int64_t k = 0; k < std::min(o.frames, o.horizon); ++k) {
            char name[64];
            std::snprintf(name, sizeof name, "/pred_%03d.ppm", int(k));
            std::string pp = o.out + name;
            metrics::write_ppm(pred.values().data() + k * fe, ds.channels, ds.height, ds.width,
                               pp);
            std::snprintf(name, sizeof name, "/truth_%03d.ppm", int(k));
            std::string tp = o.out + name;
            metrics::write_ppm(ds.frame_ptr(0, o.context + k), ds.channels, ds.height, ds.width,
                               tp);
            outputs[pp] = checksum_file(pp);
            outputs[tp] = checksum_file(tp);
        }
    }

    std::int64_t d50 = std::min<std::int64_t>(50, o.horizon);
    std::int64_t s5 = std::min<std::int64_t>(5, o.horizon);
    json m = {{"command", "eval"},
              {"config",
               {{"ckpt", o.ckpt},
                {"data", o.data},
                {"split", o.split},
                {"context", o.context},
                {"horizon", o.horizon},
                {"model", model_to_json(ck.config)}}},
              {"inputs", {{o.ckpt, checksum_file(o.ckpt)}, {o.data, checksum_file(o.data)}}},
              {"outputs", outputs},
              {"result",
               {{"sequences", std::int64_t(ds.n)},
                {"divergence_at_horizon", ev.divergence_at(o.horizon)},
                {"divergence_at_50", ev.divergence_at(d50)},
                {"ssim_first_5", ev.ssim_first(s5)},
                {"psnr_first_5", ev.psnr_first(s5)},
                {"copy_last_at_horizon", ev.copy_last_divergence_median.back()},
                {"const_velocity_at_horizon", ev.const_velocity_divergence_median.back()}}},
              {"wall_seconds", seconds_since(t0)}};
    write_manifest(o.out + "/manifest.json", m);
    std::cout << "divergence@" << o.horizon << " " << ev.divergence_at(o.horizon)
              << " (copy-last " << ev.copy_last_divergence_median.back() << ", const-velocity "
              << ev.const_velocity_divergence_median.back() << ")\n"
              << "ssim@5 " << ev.ssim_first(s5) << " psnr@5 " << ev.psnr_first(s5) << "\n";
    return 0;
}

// ----------------------------------------------------------------- probe ----

struct ProbeOpts {
    std::string ckpt, data, ood_data, target, out;
    std::uint64_t seed = 0;
    double test_frac = 0.25;
};

int cmd_probe(const ProbeOpts& o) {
    auto t0 = std::chrono::steady_clock::now();
    auto ck = load_checkpoint(o.ckpt);
    auto ds_in = data::read_dataset(o.data);
    auto ds_ood = data::read_dataset(o.ood_data);
    Rng rng(o.seed);
    auto baseline = model::init_params<float>(ck.config, rng);
    auto rep = probe::run_probe(ck.config, ck.params, baseline, ds_in, ds_ood, o.target,
                                o.test_frac);
    std::filesystem::create_directories(o.out);
    std::string csv = o.out + "/probe.csv";
    probe::write_probe_csv(rep, csv);

    json rows = json::array();
    for (const auto& r : rep.rows) {
        rows.push_back({{"name", r.name},
                        {"mae_in", r.mae_in},
                        {"mae_ood", r.mae_ood},
                        {"baseline_mae", r.baseline_mae}});
        std::cout << r.name << " mae_in " << r.mae_in << " mae_ood " << r.mae_ood
                  << " baseline " << r.baseline_mae << "\n";
    }
    json m = {{"command", "probe"},
              {"config",
               {{"ckpt", o.ckpt},
                {"data", o.data},
                {"ood_data", o.ood_data},
                {"target", o.target},
                {"test_frac", o.test_frac},
                {"seed", o.seed},
                {"model", model_to_json(ck.config)}}},
              {"seed", o.seed},
              {"inputs",
               {{o.ckpt, checksum_file(o.ckpt)},
                {o.data, checksum_file(o.data)},
                {o.ood_data, checksum_file(o.ood_data)}}},
              {"outputs", {{csv, checksum_file(csv)}}},
              {"result",
               {{"fit_n", rep.fit_n}, {"test_n", rep.test_n}, {"ood_n", rep.ood_n},
                {"rows", rows}}},
              {"wall_seconds", seconds_since(t0)}};
    write_manifest(o.out + "/manifest.json", m);
    return 0;
}

// ---------------------------------------------------------------- export ----

struct ExportOpts {
    std::vector<std::string> runs;  // id=path
    std::string out;
};

int cmd_export(const ExportOpts& o) {
    auto t0 = std::chrono::steady_clock::now();
    std::ofstream os(o.out, std::ios::trunc);
    if (!os) throw DataError("cannot write " + o.out);
    std::string header;
    std::int64_t rows = 0;
    json inputs = json::object();
    for (const auto& spec : o.runs) {
        auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0)
            throw UsageError("export: --run wants ID=PATH, got '" + spec + "'");
        std::string id = spec.substr(0, eq), path = spec.substr(eq + 1);
        std::ifstream is(path);
        if (!is) throw DataError("cannot read " + path);
        std::string line;
        if (!std::getline(is, line)) throw DataError("export: " + path + " is empty");
        if (header.empty()) {
            header = line;
            os << "run," << header << "\n";
        } else if (line != header) {
            throw DataError("export: " + path + " header '" + line + "' does not match '" +
                            header + "'");
        }
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            os << id << "," << line << "\n";
            ++rows;
        }
        inputs[path] = checksum_file(path);
    }
    os.close();
    json m = {{"command", "export"},
              {"config", {{"runs", o.runs}}},
              {"inputs", inputs},
              {"outputs", {{o.out, checksum_file(o.out)}}},
              {"result", {{"rows", rows}}},
              {"wall_seconds", seconds_since(t0)}};
    write_manifest(o.out + ".manifest.json", m);
    std::cout << "merged " << rows << " rows from " << o.runs.size() << " runs into " << o.out
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pixel-space spatiotemporal video transformer laboratory"};
    app.require_subcommand(1);

    SimgenOpts so;
    auto* sim = app.add_subcommand("simgen", "generate a simulation dataset container");
    sim->add_option("--kind", so.kind, "moon|pendulum|roller|balls2d")
        ->required()
        ->check(CLI::IsMember({"moon", "pendulum", "roller", "balls2d"}));
    sim->add_option("--n", so.n, "sequences");
    sim->add_option("--frames", so.frames, "frames per sequence");
    sim->add_option("--size", so.size, "square render size in px");
    sim->add_flag("--ood", so.ood, "sample parameters from the out-of-distribution band");
    sim->add_option("--seed", so.seed, "generator seed");
    sim->add_option("--out", so.out, "output container path")->required();

    TrainOpts to;
    auto* tr = app.add_subcommand("train", "teacher-forced training");
    tr->add_option("--data", to.data, "dataset container")->required();
    tr->add_option("--config", to.config, "JSON config with model/train sections")->required();
    tr->add_option("--out", to.out, "output directory")->required();
    tr->add_option("--epochs", to.epochs, "override config epochs");
    tr->add_option("--context", to.context, "override config context length");
    tr->add_option("--seed", to.seed, "override config seed");
    tr->add_option("--scheme", to.scheme, "override attention scheme")
        ->check(CLI::IsMember({"ls+lt", "gs+lt", "gs+t"}));

    EvalOpts eo;
    auto* ev = app.add_subcommand("eval", "autoregressive rollout evaluation");
    ev->add_option("--ckpt", eo.ckpt, "checkpoint path")->required();
    ev->add_option("--data", eo.data, "dataset container")->required();
    ev->add_option("--context", eo.context, "context frames");
    ev->add_option("--horizon", eo.horizon, "rollout steps");
    ev->add_option("--split", eo.split, "all|train|val")
        ->check(CLI::IsMember({"all", "train", "val"}));
    ev->add_option("--frames", eo.frames, "export this many predicted frames as pixmaps");
    ev->add_option("--out", eo.out, "output directory")->required();

    ProbeOpts po;
    auto* pr = app.add_subcommand("probe", "linear probes on frozen activations");
    pr->add_option("--ckpt", po.ckpt, "checkpoint path")->required();
    pr->add_option("--data", po.data, "in-distribution dataset")->required();
    pr->add_option("--ood-data", po.ood_data, "out-of-distribution dataset")->required();
    pr->add_option("--target", po.target, "gravity|mass")
        ->required()
        ->check(CLI::IsMember({"gravity", "mass"}));
    pr->add_option("--seed", po.seed, "random-init baseline seed");
    pr->add_option("--test-frac", po.test_frac, "held-out fraction of the fit dataset");
    pr->add_option("--out", po.out, "output directory")->required();

    ExportOpts xo;
    auto* ex = app.add_subcommand("export", "merge run CSVs into one long-format table");
    ex->add_option("--run", xo.runs, "ID=PATH, repeatable");
    ex->add_option("--out", xo.out, "merged CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (sim->parsed()) return cmd_simgen(so);
        if (tr->parsed()) return cmd_train(to);
        if (ev->parsed()) return cmd_eval(eo);
        if (pr->parsed()) return cmd_probe(po);
        if (ex->parsed()) return cmd_export(xo);
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ValueError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ShapeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
