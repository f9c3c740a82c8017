#include "fpvt/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "fpvt/checkpoint.hpp"
#include "fpvt/config.hpp"
#include "fpvt/gradcheck_suite.hpp"
#include "fpvt/trainer.hpp"
#include "fpvt/verification.hpp"

namespace fpvt {

namespace fs = std::filesystem;

namespace {

// Parameter count reported for the published four-stage model.
constexpr double kReferenceParamsMillions = 28.2;

struct Options {
    std::string config;
    std::string out_dir;
    std::string ckpt;
    std::string pairs;
    std::string resume;
    std::uint64_t seed = 0;
    std::int64_t steps = -1;
    int folds = 10;
    int n = 20;
    int warmup = 3;
    double tolerance = 1e-4;
    bool inject_fault = false;
};

RunConfig config_from(const Options& o) {
    return o.config.empty() ? parse_config("", "<defaults>") : load_config(o.config);
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string step_file(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%06lld.fpvt", static_cast<long long>(step));
    return buf;
}

int cmd_train(const Options& o, bool seed_given, std::ostream& out) {
    RunConfig cfg = config_from(o);
    if (seed_given) cfg.seed = o.seed;
    if (o.steps >= 0) cfg.train.steps = o.steps;
    const auto text = to_text(cfg);
    const RunConfig run = cfg.resolved();

    fs::create_directories(o.out_dir);
    const Dataset data = generate_dataset(run.data, run.model.precision);
    Model model(run.model);
    FdrState head(run.fdr, run.model.precision);
    Trainer trainer(model, head, data, run.train, run.optim);
    if (!o.resume.empty()) trainer.restore(load_checkpoint(o.resume));

    std::ofstream log(fs::path(o.out_dir) / "train.log", std::ios::app);
    if (!log) throw std::runtime_error("cannot write " + (fs::path(o.out_dir) / "train.log").string());
    auto save = [&] {
        const auto path = fs::path(o.out_dir) / step_file(trainer.steps_done());
        save_checkpoint(path, trainer.checkpoint(text));
        out << "checkpoint " << path.string() << '\n';
    };
    save();
    while (trainer.steps_done() < run.train.steps) {
        const auto entry = trainer.step();
        log << entry.line() << '\n';
        if (entry.step % 25 == 0 || entry.step == run.train.steps) out << entry.line() << '\n';
        if (run.train.checkpoint_every > 0 && entry.step % run.train.checkpoint_every == 0 && entry.step != run.train.steps) {
            save();
        }
    }
    log.flush();
    if (trainer.steps_done() > 0) {
        save();
        out << "train_accuracy=" << fmt("%.4f", trainer.evaluate_accuracy()) << '\n';
    }
    return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(o.ckpt);
    const RunConfig run = parse_config(ckpt.config_text, o.ckpt + " (embedded config)").resolved();
    Model model(run.model);
    for (const auto& e : model.registry().entries()) {
        const Tensor* src = ckpt.find(e.name);
        if (!src || src->shape() != e.tensor.shape()) throw CheckpointError("checkpoint does not match its config at '" + e.name + "'");
        Tensor dst = e.tensor;
        auto d = dst.mutable_data();
        std::copy(src->data().begin(), src->data().end(), d.begin());
    }

    std::ifstream in(o.pairs);
    if (!in) throw ConfigError("cannot read pairs file '" + o.pairs + "'");
    const auto records = parse_pairs(in, o.pairs);

    NoGradGuard no_grad;
    model.set_training(false);
    auto embed_one = [&](int id, int sample) {
        auto px = render_face(run.data, id, sample);
        const int S = run.data.image_size;
        return model.embed(Tensor({1, run.data.channels, S, S}, std::move(px), run.model.precision));
    };
    std::vector<VerificationPair> pairs;
    for (const auto& r : records) pairs.push_back({embed_one(r.id_a, r.sample_a), embed_one(r.id_b, r.sample_b), r.same});
    const auto rep = kfold_verification(pairs, o.folds);
    for (std::size_t f = 0; f < rep.fold_accuracy.size(); ++f) {
        out << "fold " << f + 1 << " accuracy=" << fmt("%.4f", rep.fold_accuracy[f])
            << " threshold=" << fmt("%.3f", rep.thresholds[f]) << '\n';
    }
    out << "mean_accuracy=" << fmt("%.4f", rep.mean) << " std=" << fmt("%.4f", rep.stddev) << " pairs=" << pairs.size()
        << '\n';
    return kExitOk;
}

int cmd_audit(const Options& o, std::ostream& out) {
    const RunConfig run = config_from(o).resolved();
    Model model(run.model);
    const auto rep = audit(model);

    out << "total_params=" << rep.total_params << '\n';
    out << std::left << std::setw(32) << "module" << std::right << std::setw(12) << "params" << '\n';
    for (const auto& [name, n] : rep.modules) out << std::left << std::setw(32) << name << std::right << std::setw(12) << n << '\n';

    out << "\nstage  grid    tokens  kv_len  heads  layers  scores/head  light/standard conv weights       macs\n";
    for (std::size_t i = 0; i < rep.stages.size(); ++i) {
        const auto& s = rep.stages[i];
        std::ostringstream grid, conv;
        grid << s.grid_h << 'x' << s.grid_w;
        conv << s.lightweight_weights << " / " << s.standard_weights;
        out << std::left << std::setw(7) << i + 1 << std::setw(8) << grid.str() << std::right << std::setw(6) << s.tokens
            << std::setw(8) << s.kv_length << std::setw(7) << s.heads << std::setw(8) << s.layers << std::setw(15)
            << s.score_entries << "  " << std::left << std::setw(30) << conv.str() << std::right
            << std::setw(12) << s.macs << '\n';
    }
    out << "total_macs=" << rep.total_macs << '\n';

    // A live 64-channel block (hidden width 64) counted from its registry.
    Rng rng(0);
    ParamRegistry reg;
    CffnWeights::init(CffnConfig{64, 1, 3}, rng, Precision::f32).collect("probe.", reg);
    const auto live = count_lightweight_weights(reg, "probe.");
    const auto formula = depthwise_param_count(3, 64, 64);
    out << "\ndepthwise k=3 n_in=64 n_out=64: " << live << " / " << formula.standard << " weights (light-weight / standard)"
        << (live == formula.lightweight ? "" : "  MISMATCH") << '\n';
    out << "published reference: " << fmt("%.1fM", kReferenceParamsMillions)
        << " parameters (reference figure, not asserted); this config: " << fmt("%.1fM", rep.total_params / 1e6) << '\n';
    return live == formula.lightweight ? kExitOk : kExitCheckFailed;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
    const RunConfig run = config_from(o).resolved();
    GradCheckOptions opts;
    opts.tolerance = o.tolerance;
    const auto reports = run_gradcheck_suite(run.model, opts, o.inject_fault);
    int failures = 0;
    for (const auto& r : reports) {
        const bool ok = r.max_rel_error <= o.tolerance;
        failures += !ok;
        out << (ok ? "ok   " : "FAIL ") << std::left << std::setw(22) << r.name << " max_rel_err=" << fmt("%.3e", r.max_rel_error)
            << " at " << r.worst_tensor << '[' << r.worst_index << "] checked=" << r.checked << '\n';
    }
    out << (failures ? "gradcheck FAILED: " : "gradcheck passed: ") << reports.size() - static_cast<std::size_t>(failures)
        << '/' << reports.size() << " within tolerance " << fmt("%g", o.tolerance) << '\n';
    return failures ? kExitCheckFailed : kExitOk;
}

int cmd_bench(const Options& o, std::ostream& out) {
    const RunConfig run = config_from(o).resolved();
    Model model(run.model);
    const auto stats = bench_inference(model, o.n, o.warmup, run.seed);
    out << "images=" << stats.images << " warmup=" << o.warmup << " params=" << model.registry().param_count() << '\n';
    out << "p95_ms=" << fmt("%.3f", stats.p95_ms) << '\n';
    out << "median_ms=" << fmt("%.3f", stats.median_ms) << '\n';
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Face pyramid vision transformer: train, evaluate, audit, check gradients, benchmark", "fpvt"};
    app.require_subcommand(1);
    Options o;

    auto* train = app.add_subcommand("train", "Train on the synthetic identity dataset");
    train->add_option("--config", o.config, "Config file (default: built-in toy config)");
    train->add_option("--out", o.out_dir, "Output directory for checkpoints and train.log")->required();
    auto* seed_opt = train->add_option("--seed", o.seed, "Global seed (overrides run.seed)");
    train->add_option("--steps", o.steps, "Number of steps (overrides train.steps)")->check(CLI::NonNegativeNumber);
    train->add_option("--resume", o.resume, "Continue from a checkpoint");

    auto* eval = app.add_subcommand("eval", "k-fold verification accuracy over a pairs file");
    eval->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
    eval->add_option("--pairs", o.pairs, "Pairs file: idA sampleA idB sampleB label")->required();
    eval->add_option("--folds", o.folds, "Number of folds")->check(CLI::Range(2, 1000000));

    auto* audit_cmd = app.add_subcommand("audit", "Parameter, attention-memory and MAC report");
    audit_cmd->add_option("--config", o.config, "Config file");

    auto* grad = app.add_subcommand("gradcheck", "64-bit finite-difference suite");
    grad->add_option("--config", o.config, "Config file");
    grad->add_option("--tolerance", o.tolerance, "Maximum relative error")->check(CLI::PositiveNumber);
    grad->add_flag("--inject-fault", o.inject_fault, "Add an op with a wrong backward rule (harness self-test)");

    auto* bench = app.add_subcommand("bench", "Per-image inference latency");
    bench->add_option("--config", o.config, "Config file");
    bench->add_option("--n", o.n, "Timed images");
    bench->add_option("--warmup", o.warmup, "Discarded warm-up images")->check(CLI::NonNegativeNumber);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "fpvt: " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        if (*train) return cmd_train(o, seed_opt->count() > 0, out);
        if (*eval) return cmd_eval(o, out);
        if (*audit_cmd) return cmd_audit(o, out);
        if (*grad) return cmd_gradcheck(o, out);
        if (*bench) return cmd_bench(o, out);
    } catch (const ConfigError& e) {
        err << "fpvt: config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ParseError& e) {
        err << "fpvt: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ProtocolError& e) {
        err << "fpvt: " << e.what() << '\n';
        return kExitUsage;
    } catch (const CheckpointError& e) {
        err << "fpvt: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        err << "fpvt: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "fpvt: " << e.what() << '\n';
        return kExitCheckFailed;
    }
    return kExitUsage;
}

}  // namespace fpvt
