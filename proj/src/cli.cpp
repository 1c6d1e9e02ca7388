// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/cli.hpp"

#include <fstream>
#include <iterator>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "smora/analysis.hpp"
#include "smora/checkpoint.hpp"

namespace smora::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <class T>
void read(const json& v, const std::string& name, T& out) {
    try {
        out = v.get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(name + ": " + e.what());
    }
}

void reject_unknown(const std::string& section, const std::string& key) {
    throw ConfigError(section + "." + key + ": unknown key");
}

void require_object(const json& j, const std::string& name) {
    if (!j.is_object()) throw ConfigError(name + ": expected an object");
}

fs::path resolve(const fs::path& base, const fs::path& p) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
}

SweepSection parse_sweep(const json& j) {
    require_object(j, "sweep");
    SweepSection s;
    for (const auto& [k, v] : j.items()) {
        if (k == "r_total") read(v, "sweep.r_total", s.r_total);
        else if (k == "r_active") read(v, "sweep.r_active", s.r_active);
        else if (k == "seeds") read(v, "sweep.seeds", s.seeds);
        else if (k == "threads") read(v, "sweep.threads", s.threads);
        else reject_unknown("sweep", k);
    }
    if (s.seeds.empty()) throw ConfigError("sweep.seeds: at least one seed required");
    if (s.threads == 0) throw ConfigError("sweep.threads: must be positive");
    return s;
}

AblationSection parse_ablation(const json& j) {
    require_object(j, "ablation");
    AblationSection s;
    for (const auto& [k, v] : j.items()) {
        if (k == "r_total") read(v, "ablation.r_total", s.r_total);
        else if (k == "k_values") read(v, "ablation.k_values", s.k_values);
        else if (k == "seeds") read(v, "ablation.seeds", s.seeds);
        else if (k == "threads") read(v, "ablation.threads", s.threads);
        else reject_unknown("ablation", k);
    }
    if (s.seeds.empty() || s.k_values.empty())
        throw ConfigError("ablation: seeds and k_values must be non-empty");
    for (auto k : s.k_values)
        if (k == 0 || k > s.r_total) throw ConfigError("ablation.k_values: every k must lie in [1, r_total]");
    if (s.threads == 0) throw ConfigError("ablation.threads: must be positive");
    return s;
}

AnalyzeSection parse_analyze(const json& j, const fs::path& base) {
    require_object(j, "analyze");
    AnalyzeSection s;
    std::string p;
    for (const auto& [k, v] : j.items()) {
        if (k == "checkpoint") {
            read(v, "analyze.checkpoint", p);
            s.checkpoint = resolve(base, p);
        } else if (k == "metrics") {
            read(v, "analyze.metrics", p);
            s.metrics = resolve(base, p);
        } else if (k == "cosine") read(v, "analyze.cosine", s.cosine);
        else reject_unknown("analyze", k);
    }
    return s;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os << text;
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

TaskSuite suite_from(const RunConfig& cfg) {
    Rng data = Rng(cfg.seed).child("data");
    return gen_multitask_data(cfg.suite, data);
}

template <class F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return kIoError;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kIoError;
    } catch (const NumericError& e) {
        err << "error: " << e.what() << '\n';
        return kNumericError;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kConfigError;
    } catch (const json::exception& e) {
        err << "error: " << e.what() << '\n';
        return kConfigError;
    }
}

}  // namespace

BenchConfig bench_config_from_json(const json& j) {
    require_object(j, "bench");
    BenchConfig b;
    for (const auto& [k, v] : j.items()) {
        if (k == "t") read(v, "bench.t", b.t);
        else if (k == "d") read(v, "bench.d", b.d);
        else if (k == "r") read(v, "bench.r", b.r);
        else if (k == "k") read(v, "bench.k", b.k);
        else if (k == "dtype") read(v, "bench.dtype", b.dtype);
        else if (k == "threads") read(v, "bench.threads", b.threads);
        else if (k == "repeats") read(v, "bench.repeats", b.repeats);
        else if (k == "seed") read(v, "bench.seed", b.seed);
        else reject_unknown("bench", k);
    }
    return b;
}

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
    require_object(j, "config");
    if (!j.contains("version")) throw ConfigError("version: mandatory field missing");
    RunConfig c;
    for (const auto& [k, v] : j.items()) {
        if (k == "version") {
            read(v, "version", c.version);
            if (c.version != kConfigVersion)
                throw ConfigError("version: unsupported value " + std::to_string(c.version));
        } else if (k == "seed") read(v, "seed", c.seed);
        else if (k == "suite") c.suite = suite_spec_from_json(v);
        else if (k == "train") {
            require_object(v, "train");
            if (v.contains("seed")) throw ConfigError("train.seed: use the top-level seed");
            c.train = train_config_from_json(v);
        } else if (k == "bench") c.bench = bench_config_from_json(v);
        else if (k == "sweep") c.sweep = parse_sweep(v);
        else if (k == "ablation") c.ablation = parse_ablation(v);
        else if (k == "analyze") c.analyze = parse_analyze(v, base_dir);
        else if (k == "output") {
            std::string p;
            read(v, "output", p);
            c.output = p;
        } else throw ConfigError(k + ": unknown key");
    }
    c.output = resolve(base_dir, c.output);
    c.train.seed = c.seed;
    try {
        c.suite.validate();
        c.train.validate();
        c.bench.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

RunConfig load_run_config(const fs::path& path) {
    const std::string text = read_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
    return parse_run_config(j, path.parent_path());
}

json to_json(const RunConfig& c) {
    json train = to_json(c.train);
    train.erase("seed");
    const auto& b = c.bench;
    return {{"version", c.version},
            {"seed", c.seed},
            {"suite", to_json(c.suite)},
            {"train", train},
            {"bench",
             {{"t", b.t}, {"d", b.d}, {"r", b.r}, {"k", b.k}, {"dtype", b.dtype}, {"threads", b.threads},
              {"repeats", b.repeats}, {"seed", b.seed}}},
            {"sweep",
             {{"r_total", c.sweep.r_total},
              {"r_active", c.sweep.r_active},
              {"seeds", c.sweep.seeds},
              {"threads", c.sweep.threads}}},
            {"ablation",
             {{"r_total", c.ablation.r_total},
              {"k_values", c.ablation.k_values},
              {"seeds", c.ablation.seeds},
              {"threads", c.ablation.threads}}},
            {"analyze",
             {{"checkpoint", c.analyze.checkpoint.string()},
              {"metrics", c.analyze.metrics.string()},
              {"cosine", c.analyze.cosine}}},
            {"output", c.output.string()}};
}

int cmd_train(const fs::path& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const RunConfig cfg = load_run_config(config);
        const TaskSuite suite = suite_from(cfg);
        TrainResult res = train_adapter(suite, cfg.train);
        ensure_dir(cfg.output);
        save_checkpoint(cfg.output / "checkpoint.smck", res.model, cfg.seed);
        json metrics = to_json(res.metrics);
        metrics["params"] = {{"total", count_params(res.model).total},
                             {"trainable", count_params(res.model).trainable},
                             {"active_per_token", count_params(res.model).active_per_token}};
        write_file(cfg.output / "metrics.json", metrics.dump(2) + "\n");
        out << "kind=" << to_string(res.model.spec.kind) << " avg_mse=" << format_double(res.metrics.eval.avg_mse);
        if (!res.metrics.max_vio.empty()) out << " max_vio=" << format_double(res.metrics.eval_max_vio);
        out << '\n';
        return static_cast<int>(kOk);
    });
}

int cmd_bench(const BenchConfig& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        config.validate();
        out << to_json(bench_kernels(config)).dump(2) << '\n';
        return static_cast<int>(kOk);
    });
}

int cmd_check_equivalence(const EquivalenceSuiteConfig& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const EquivalenceReport rep = run_equivalence_suite(config);
        out << "trials=" << rep.trials << " max_diff=" << format_double(rep.max_diff)
            << " tolerance=" << format_double(config.tolerance) << ' ' << (rep.passed ? "PASS" : "FAIL") << '\n';
        return static_cast<int>(rep.passed ? kOk : kNumericError);
    });
}

int cmd_sweep(const fs::path& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const RunConfig cfg = load_run_config(config);
        const auto rows = granularity_sweep(cfg.sweep.r_total, cfg.sweep.r_active, cfg.suite, cfg.train,
                                            cfg.sweep.seeds, cfg.sweep.threads);
        ensure_dir(cfg.output);
        std::ostringstream csv;
        write_sweep_csv(csv, rows);
        write_file(cfg.output / "sweep.csv", csv.str());
        out << csv.str();
        return static_cast<int>(kOk);
    });
}

int cmd_rank_ablation(const fs::path& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const RunConfig cfg = load_run_config(config);
        const auto rows = rank_ablation(cfg.ablation.r_total, cfg.ablation.k_values, cfg.suite, cfg.train,
                                        cfg.ablation.seeds, cfg.ablation.threads);
        ensure_dir(cfg.output);
        std::ostringstream csv;
        write_ablation_csv(csv, rows);
        write_file(cfg.output / "rank_ablation.csv", csv.str());
        out << csv.str();
        return static_cast<int>(kOk);
    });
}

int cmd_analyze(const fs::path& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const RunConfig cfg = load_run_config(config);
        const fs::path ck_path =
            cfg.analyze.checkpoint.empty() ? cfg.output / "checkpoint.smck" : cfg.analyze.checkpoint;
        const Checkpoint ck = load_checkpoint(ck_path);
        ensure_dir(cfg.output);

        const auto [a, b] = adapter_factors(ck.model);
        const Matrix sim = rank_similarity(a, b, cfg.analyze.cosine);
        std::ostringstream sim_csv;
        write_similarity_csv(sim_csv, sim);
        write_file(cfg.output / "similarity.csv", sim_csv.str());

        json summary{{"kind", std::string(to_string(ck.model.spec.kind))},
                     {"rank", sim.rows()},
                     {"cosine", cfg.analyze.cosine}};
        if (sim.rows() >= 2) summary["diagonal_dominance"] = diagonal_dominance(sim);
        std::vector<std::string> written{"similarity.csv"};

        if (const auto* layer = std::get_if<SmoraLayer>(&ck.model.layer)) {
            if (layer->d_in() != cfg.suite.d_in || layer->d_out() != cfg.suite.d_out)
                throw ConfigError("analyze: checkpoint shape does not match the suite dimensions");
            const TaskSuite suite = suite_from(cfg);
            const auto decisions = route_all(*layer, suite.eval_x);
            const auto dist = routing_distribution(decisions, suite.eval_task, suite.spec.tasks, layer->experts());
            std::ostringstream hist, tsim;
            write_histogram_csv(hist, dist);
            write_similarity_csv(tsim, dist.task_similarity);
            write_file(cfg.output / "routing_histogram.csv", hist.str());
            write_file(cfg.output / "task_similarity.csv", tsim.str());
            written.push_back("routing_histogram.csv");
            written.push_back("task_similarity.csv");
            summary["eval_max_vio"] = max_vio(accumulate_stats(decisions, layer->experts()));
        }
        if (!cfg.analyze.metrics.empty()) {
            json mj;
            try {
                mj = json::parse(read_file(cfg.analyze.metrics));
            } catch (const json::exception& e) {
                throw ConfigError("analyze.metrics: not valid JSON: " + std::string(e.what()));
            }
            RunMetrics m;
            read(mj.at("max_vio"), "metrics.max_vio", m.max_vio);
            read(mj.at("final_counts"), "metrics.final_counts", m.final_counts);
            const LoadTrace trace = load_trace(m);
            std::ostringstream csv;
            write_load_trace_csv(csv, trace);
            write_file(cfg.output / "load_trace.csv", csv.str());
            summary["final_normalized_loads"] = trace.normalized_loads;
            written.push_back("load_trace.csv");
        }
        summary["files"] = written;
        write_file(cfg.output / "analysis.json", summary.dump(2) + "\n");
        for (const auto& f : written) out << (cfg.output / f).string() << '\n';
        return static_cast<int>(kOk);
    });
}

}  // namespace smora::cli
