// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/training.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "smora/parallel.hpp"

namespace smora {

namespace {

void require(bool ok, const std::string& what, const std::string& msg) {
    if (!ok) throw std::invalid_argument(what + ": " + msg);
}

template <class T>
void read_key(const nlohmann::json& v, const std::string& prefix, const std::string& key, T& out) {
    try {
        out = v.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(prefix + key + ": " + e.what());
    }
}

std::string_view to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd"; }

Optimizer parse_optimizer(std::string_view s) {
    if (s == "sgd") return Optimizer::sgd;
    if (s == "adam") return Optimizer::adam;
    throw std::invalid_argument("unknown optimizer '" + std::string(s) + "'");
}

struct OptimizerState {
    std::vector<Vector> m, v;
    std::size_t t = 0;
};

void apply_update(const TrainConfig& cfg, std::vector<TensorView>& trainable, const std::vector<Vector>& grads,
                  OptimizerState& st) {
    if (cfg.optimizer == Optimizer::sgd) {
        for (std::size_t i = 0; i < trainable.size(); ++i) axpy(-cfg.lr, grads[i], trainable[i].data);
        return;
    }
    if (st.m.empty()) {
        for (const auto& g : grads) {
            st.m.emplace_back(g.size(), 0.0);
            st.v.emplace_back(g.size(), 0.0);
        }
    }
    ++st.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < trainable.size(); ++i) {
        auto p = trainable[i].data;
        const auto& g = grads[i];
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            p[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
        }
    }
}

}  // namespace

void TaskSuiteSpec::validate() const {
    const std::string w = "suite";
    require(tasks >= 1, w, "tasks must be at least 1");
    require(d_in >= 1 && d_out >= 1, w, "d_in and d_out must be positive");
    require(delta_rank >= 1, w, "delta_rank must be at least 1");
    require(shared_fraction >= 0.0 && shared_fraction <= 1.0, w, "shared_fraction must lie in [0, 1]");
    require(train_per_task >= 1 && eval_per_task >= 1, w, "every task needs train and eval samples");
    require(center_scale >= 0.0 && input_std >= 0.0 && delta_scale >= 0.0 && noise_std >= 0.0, w,
            "scales must be nonnegative");
}

nlohmann::json to_json(const TaskSuiteSpec& s) {
    return {{"tasks", s.tasks},
            {"d_in", s.d_in},
            {"d_out", s.d_out},
            {"delta_rank", s.delta_rank},
            {"shared_fraction", s.shared_fraction},
            {"train_per_task", s.train_per_task},
            {"eval_per_task", s.eval_per_task},
            {"center_scale", s.center_scale},
            {"input_std", s.input_std},
            {"delta_scale", s.delta_scale},
            {"noise_std", s.noise_std}};
}

TaskSuiteSpec suite_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("suite: expected an object");
    TaskSuiteSpec s;
    const std::string p = "suite.";
    for (const auto& [key, v] : j.items()) {
        if (key == "tasks") read_key(v, p, key, s.tasks);
        else if (key == "d_in") read_key(v, p, key, s.d_in);
        else if (key == "d_out") read_key(v, p, key, s.d_out);
        else if (key == "delta_rank") read_key(v, p, key, s.delta_rank);
        else if (key == "shared_fraction") read_key(v, p, key, s.shared_fraction);
        else if (key == "train_per_task") read_key(v, p, key, s.train_per_task);
        else if (key == "eval_per_task") read_key(v, p, key, s.eval_per_task);
        else if (key == "center_scale") read_key(v, p, key, s.center_scale);
        else if (key == "input_std") read_key(v, p, key, s.input_std);
        else if (key == "delta_scale") read_key(v, p, key, s.delta_scale);
        else if (key == "noise_std") read_key(v, p, key, s.noise_std);
        else throw std::invalid_argument(p + key + ": unknown key");
    }
    s.validate();
    return s;
}

TaskSuite gen_multitask_data(const TaskSuiteSpec& spec, Rng& rng) {
    spec.validate();
    TaskSuite s;
    s.spec = spec;
    const std::size_t m = spec.tasks, din = spec.d_in, dout = spec.d_out, rho = spec.delta_rank;
    Rng base_rng = rng.child("base");
    s.w0 = normal_init(dout, din, 1.0 / std::sqrt(static_cast<double>(din)), base_rng);

    // Factor scale keeps each delta's entries at roughly delta_scale / sqrt(d_in).
    const double fu = std::sqrt(spec.delta_scale / static_cast<double>(rho));
    const double fv = std::sqrt(spec.delta_scale / static_cast<double>(din));
    const auto shared = static_cast<std::size_t>(std::llround(spec.shared_fraction * static_cast<double>(rho)));
    Rng shared_rng = rng.child("shared");
    const Matrix shared_u = normal_init(dout, rho, fu, shared_rng);
    const Matrix shared_v = normal_init(rho, din, fv, shared_rng);
    for (std::size_t t = 0; t < m; ++t) {
        Rng task_rng = rng.child("task").child(t);
        Matrix u = normal_init(dout, rho, fu, task_rng);
        Matrix v = normal_init(rho, din, fv, task_rng);
        for (std::size_t q = 0; q < shared; ++q) {
            for (std::size_t o = 0; o < dout; ++o) u(o, q) = shared_u(o, q);
            for (std::size_t i = 0; i < din; ++i) v(q, i) = shared_v(q, i);
        }
        s.deltas.push_back(dense_matmul(u, v));
        Vector c(din);
        for (double& x : c) x = task_rng.normal();
        const double norm = std::sqrt(dot(c, c));
        for (double& x : c) x *= spec.center_scale / norm;
        s.centers.push_back(std::move(c));
    }

    auto fill = [&](std::size_t per_task, Rng r, Matrix& xs, Matrix& ys, std::vector<std::size_t>& labels) {
        xs = Matrix(m * per_task, din);
        ys = Matrix(m * per_task, dout);
        labels.clear();
        for (std::size_t t = 0; t < m; ++t) {
            const Matrix teacher = add(s.w0, s.deltas[t]);
            for (std::size_t i = 0; i < per_task; ++i) {
                const std::size_t row = t * per_task + i;
                auto x = xs.row(row);
                for (std::size_t j = 0; j < din; ++j) x[j] = s.centers[t][j] + spec.input_std * r.normal();
                const Vector y = matvec(teacher, x);
                auto yr = ys.row(row);
                for (std::size_t o = 0; o < dout; ++o) yr[o] = y[o] + spec.noise_std * r.normal();
                labels.push_back(t);
            }
        }
    };
    fill(spec.train_per_task, rng.child("train"), s.train_x, s.train_y, s.train_task);
    fill(spec.eval_per_task, rng.child("eval"), s.eval_x, s.eval_y, s.eval_task);
    return s;
}

void TrainConfig::validate() const {
    adapter.validate();
    const std::string w = "train";
    require(lr >= 0.0 && std::isfinite(lr), w, "lr must be finite and nonnegative");
    require(steps >= 1, w, "steps must be at least 1");
    require(batch >= 1, w, "batch must be at least 1");
    require(threads >= 1, w, "threads must be at least 1");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0, w, "invalid adam constants");
    require(std::isfinite(router_skew), w, "router_skew must be finite");
    if (adapter.kind == AdapterKind::smora)
        require(skew_experts <= adapter.rank / adapter.block, w, "skew_experts exceeds the number of experts");
    else
        require(skew_experts == 0 || router_skew == 0.0, w, "router skew applies to smora only");
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"adapter", to_json(c.adapter)},
            {"optimizer", std::string(to_string(c.optimizer))},
            {"lr", c.lr},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"steps", c.steps},
            {"batch", c.batch},
            {"seed", c.seed},
            {"balancing", c.balancing},
            {"router_skew", c.router_skew},
            {"skew_experts", c.skew_experts},
            {"threads", c.threads},
            {"record_counts", c.record_counts}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("train: expected an object");
    TrainConfig c;
    const std::string p = "train.";
    for (const auto& [key, v] : j.items()) {
        if (key == "adapter") c.adapter = adapter_spec_from_json(v);
        else if (key == "optimizer") {
            std::string s;
            read_key(v, p, key, s);
            try {
                c.optimizer = parse_optimizer(s);
            } catch (const std::invalid_argument& e) {
                throw std::invalid_argument(p + key + ": " + e.what());
            }
        } else if (key == "lr") read_key(v, p, key, c.lr);
        else if (key == "beta1") read_key(v, p, key, c.beta1);
        else if (key == "beta2") read_key(v, p, key, c.beta2);
        else if (key == "eps") read_key(v, p, key, c.eps);
        else if (key == "steps") read_key(v, p, key, c.steps);
        else if (key == "batch") read_key(v, p, key, c.batch);
        else if (key == "seed") read_key(v, p, key, c.seed);
        else if (key == "balancing") read_key(v, p, key, c.balancing);
        else if (key == "router_skew") read_key(v, p, key, c.router_skew);
        else if (key == "skew_experts") read_key(v, p, key, c.skew_experts);
        else if (key == "threads") read_key(v, p, key, c.threads);
        else if (key == "record_counts") read_key(v, p, key, c.record_counts);
        else throw std::invalid_argument(p + key + ": unknown key");
    }
    c.validate();
    return c;
}

nlohmann::json to_json(const RunMetrics& m) {
    nlohmann::json j{{"steps", m.loss.size()},
                     {"loss", m.loss},
                     {"max_vio", m.max_vio},
                     {"final_counts", m.final_counts},
                     {"eval_counts", m.eval_counts},
                     {"eval_max_vio", m.eval_max_vio},
                     {"eval", {{"per_task_mse", m.eval.per_task_mse}, {"avg_mse", m.eval.avg_mse}}}};
    if (!m.counts.empty()) j["counts"] = m.counts;
    return j;
}

EvalResult evaluate(const Model& model, const Matrix& x, const Matrix& y, const std::vector<std::size_t>& task,
                    std::size_t tasks) {
    if (x.rows() != y.rows() || x.rows() != task.size())
        throw std::invalid_argument("evaluate: samples, targets and labels must align");
    if (x.cols() != model.d_in() || y.cols() != model.d_out())
        throw std::invalid_argument("evaluate: data shape does not match the model");
    std::vector<double> se(tasks, 0.0);
    std::vector<std::size_t> count(tasks, 0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        if (task[i] >= tasks) throw std::invalid_argument("evaluate: task label out of range");
        const Vector p = predict(model, x.row(i));
        const auto t = y.row(i);
        double s = 0.0;
        for (std::size_t o = 0; o < p.size(); ++o) s += (p[o] - t[o]) * (p[o] - t[o]);
        se[task[i]] += s;
        ++count[task[i]];
    }
    EvalResult r;
    for (std::size_t t = 0; t < tasks; ++t) {
        if (count[t] == 0) throw std::invalid_argument("evaluate: task " + std::to_string(t) + " has no samples");
        r.per_task_mse.push_back(se[t] / static_cast<double>(count[t] * model.d_out()));
        r.avg_mse += r.per_task_mse.back();
    }
    r.avg_mse /= static_cast<double>(tasks);
    return r;
}

std::vector<GateDecision> route_all(const SmoraLayer& layer, const Matrix& x) {
    if (x.cols() != layer.d_in()) throw std::invalid_argument("route_all: input width does not match the layer");
    std::vector<GateDecision> out;
    out.reserve(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) out.push_back(gate(layer.router, x.row(i), layer.k, layer.bias_in_weights));
    return out;
}

EvalResult evaluate(const Model& model, const TaskSuite& suite) {
    return evaluate(model, suite.eval_x, suite.eval_y, suite.eval_task, suite.spec.tasks);
}

RunMetrics train_model(Model& model, const TaskSuite& suite, const TrainConfig& config) {
    config.validate();
    if (suite.train_x.rows() == 0) throw std::invalid_argument("train: empty suite");
    const Rng root(config.seed);
    Rng batch_rng = root.child("data").child("batches");
    const std::uint64_t gumbel_seed = root.child("gumbel").next_u64();

    std::vector<TensorView> trainable;
    for (auto& t : tensors(model))
        if (t.trainable) trainable.push_back(t);
    OptimizerState opt;
    auto* routed = std::get_if<SmoraLayer>(&model.layer);

    RunMetrics metrics;
    std::vector<std::size_t> rows(config.batch);
    for (std::size_t step = 0; step < config.steps; ++step) {
        for (auto& r : rows) r = batch_rng.below(suite.train_x.rows());
        BatchResult br = batch_gradient(model, suite.train_x, suite.train_y, rows, gumbel_seed,
                                        static_cast<std::uint64_t>(step) * config.batch, config.threads);
        if (!std::isfinite(br.loss))
            throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
        metrics.loss.push_back(br.loss);
        if (routed) {
            metrics.max_vio.push_back(max_vio(br.stats));
            if (config.record_counts) metrics.counts.push_back(br.stats.counts);
            metrics.final_counts = br.stats.counts;
        }
        apply_update(config, trainable, br.grads, opt);
        for (const auto& t : trainable)
            if (!all_finite(t.data))
                throw NumericError("training diverged: non-finite parameter '" + t.name + "' at step " +
                                   std::to_string(step));
        if (routed && config.balancing) update_bias(routed->router, br.stats);
    }
    metrics.eval = evaluate(model, suite);
    if (routed) {
        const RoutingStats st = accumulate_stats(route_all(*routed, suite.eval_x), routed->experts());
        metrics.eval_counts = st.counts;
        metrics.eval_max_vio = max_vio(st);
    }
    return metrics;
}

TrainResult train_adapter(const TaskSuite& suite, const TrainConfig& config) {
    config.validate();
    Rng init_rng = Rng(config.seed).child("init");
    Model model = make_model(config.adapter, suite.w0, init_rng);
    if (auto* l = std::get_if<SmoraLayer>(&model.layer); l && config.skew_experts > 0 && config.router_skew != 0.0) {
        Vector mean(suite.train_x.cols(), 0.0);
        for (std::size_t i = 0; i < suite.train_x.rows(); ++i) axpy(1.0, suite.train_x.row(i), mean);
        const double norm = std::sqrt(dot(mean, mean));
        if (norm > 0.0)
            for (std::size_t e = 0; e < config.skew_experts; ++e)
                axpy(config.router_skew / norm, mean, l->router.w_g.row(e));
    }
    RunMetrics metrics = train_model(model, suite, config);
    return {std::move(model), std::move(metrics)};
}

std::vector<GranularityConfig> granularity_configs(std::size_t r_total, std::size_t r_active) {
    if (r_active == 0 || r_total < r_active)
        throw std::invalid_argument("granularity: need 1 <= r_active <= r_total");
    std::vector<GranularityConfig> out;
    for (std::size_t e = r_active; e >= 1; --e) {
        if (r_total % e != 0 || r_active % e != 0) continue;
        const std::size_t n = r_total / e, a = r_active / e;
        if (a <= n) out.push_back({e, n, a});
    }
    if (out.empty()) throw std::invalid_argument("granularity: no valid (e, n, a) configuration");
    return out;
}

namespace {

TaskSuite suite_for_seed(const TaskSuiteSpec& spec, std::uint64_t seed) {
    Rng data = Rng(seed).child("data");
    return gen_multitask_data(spec, data);
}

}  // namespace

std::vector<SweepRow> granularity_sweep(std::size_t r_total, std::size_t r_active, const TaskSuiteSpec& suite_spec,
                                        const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                                        std::size_t threads) {
    const auto configs = granularity_configs(r_total, r_active);
    if (seeds.empty()) throw std::invalid_argument("granularity sweep: no seeds");
    std::vector<TaskSuite> suites;
    for (auto s : seeds) suites.push_back(suite_for_seed(suite_spec, s));

    std::vector<SweepRow> rows;
    std::vector<TrainConfig> jobs;
    for (const auto& gc : configs) {
        for (auto s : seeds) {
            TrainConfig c = base;
            c.adapter.kind = AdapterKind::smora;
            c.adapter.rank = r_total;
            c.adapter.block = gc.expert_rank;
            c.adapter.k = gc.activate_count;
            c.seed = s;
            c.threads = 1;
            c.validate();
            jobs.push_back(c);
            rows.push_back({gc, s, 0.0});
        }
    }
    parallel_for(jobs.size(), threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i)
            rows[i].avg_mse = train_adapter(suites[i % seeds.size()], jobs[i]).metrics.eval.avg_mse;
    });
    return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
    os << "expert_rank,expert_count,activate_count,seed,avg_mse\n";
    for (const auto& r : rows)
        os << r.config.expert_rank << ',' << r.config.expert_count << ',' << r.config.activate_count << ','
           << r.seed << ',' << format_double(r.avg_mse) << '\n';
}

std::vector<AblationRow> rank_ablation(std::size_t r_total, const std::vector<std::size_t>& k_values,
                                       const TaskSuiteSpec& suite_spec, const TrainConfig& base,
                                       const std::vector<std::uint64_t>& seeds, std::size_t threads) {
    if (seeds.empty() || k_values.empty()) throw std::invalid_argument("rank ablation: no seeds or k values");
    for (auto k : k_values)
        if (k < 1 || k > r_total)
            throw std::invalid_argument("rank ablation: k=" + std::to_string(k) + " outside [1, r_total]");
    std::vector<std::size_t> ks = k_values;
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

    std::vector<TaskSuite> suites;
    for (auto s : seeds) suites.push_back(suite_for_seed(suite_spec, s));
    std::vector<AblationRow> rows;
    std::vector<TrainConfig> jobs;
    std::vector<std::size_t> suite_of;
    for (auto k : ks) {
        for (const char* method : {"lora", "smora"}) {
            for (std::size_t si = 0; si < seeds.size(); ++si) {
                TrainConfig c = base;
                c.seed = seeds[si];
                c.threads = 1;
                c.router_skew = 0.0;
                c.skew_experts = 0;
                if (std::string(method) == "smora") {
                    c.adapter.kind = AdapterKind::smora;
                    c.adapter.rank = r_total;
                    c.adapter.block = 1;
                    c.adapter.k = k;
                } else {
                    c.adapter.kind = AdapterKind::lora;
                    c.adapter.rank = k;
                }
                c.validate();
                jobs.push_back(c);
                suite_of.push_back(si);
                rows.push_back({method, k, seeds[si], 0.0});
            }
        }
    }
    parallel_for(jobs.size(), threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i)
            rows[i].avg_mse = train_adapter(suites[suite_of[i]], jobs[i]).metrics.eval.avg_mse;
    });
    return rows;
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
    os << "method,k,seed,avg_mse\n";
    for (const auto& r : rows)
        os << r.method << ',' << r.k << ',' << r.seed << ',' << format_double(r.avg_mse) << '\n';
}

}  // namespace smora
