// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "smora/analysis.hpp"
#include "smora/checkpoint.hpp"
#include "smora/cli.hpp"
#include "support.hpp"

using namespace smora;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("smora_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

json small_config(const std::string& kind = "smora") {
    return json{{"version", 1},
                {"seed", 7},
                {"suite",
                 {{"tasks", 2}, {"d_in", 6}, {"d_out", 5}, {"delta_rank", 2}, {"train_per_task", 30},
                  {"eval_per_task", 10}}},
                {"train",
                 {{"adapter", {{"kind", kind}, {"rank", 4}, {"k", 2}, {"experts", 3}, {"top_m", 2}}},
                  {"steps", 15},
                  {"batch", 8}}},
                {"sweep", {{"r_total", 8}, {"r_active", 4}, {"seeds", {0, 1}}}},
                {"ablation", {{"r_total", 4}, {"k_values", {2}}, {"seeds", {0, 1}}}},
                {"output", "out"}};
}

fs::path write_config(const fs::path& dir, const json& j) {
    const fs::path p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

AdapterSpec spec_of(AdapterKind kind) {
    AdapterSpec s;
    s.kind = kind;
    s.rank = 4;
    s.k = 2;
    s.experts = 3;
    s.top_m = 2;
    s.scaling = 0.75;
    return s;
}

constexpr AdapterKind kAllKinds[] = {AdapterKind::lora,  AdapterKind::smora, AdapterKind::moe,
                                     AdapterKind::smear, AdapterKind::hydra, AdapterKind::moslora};

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("round trip is bit-exact for every kind") {
    Rng rng(1);
    const Matrix w0 = normal_init(5, 6, 1.0, rng);
    for (AdapterKind kind : kAllKinds) {
        Model m = make_model(spec_of(kind), w0, rng);
        for (auto& t : tensors(m))
            for (double& v : t.data) v = rng.normal() * 1e3 + 1e-300;
        const std::string bytes = serialize_checkpoint(m, 99);
        const Checkpoint c = deserialize_checkpoint(bytes);
        CHECK(c.seed == 99);
        CHECK(c.model.spec == m.spec);
        const auto a = tensors(m);
        const auto b = tensors(c.model);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].name == b[i].name);
            CHECK(std::equal(a[i].data.begin(), a[i].data.end(), b[i].data.begin(), b[i].data.end()));
        }
        CHECK(serialize_checkpoint(c.model, 99) == bytes);
        const Vector x = test::random_vector(6, rng);
        CHECK(predict(c.model, x) == predict(m, x));
    }
}

TEST_CASE("manifest contents") {
    Rng rng(2);
    const Model m = make_model(spec_of(AdapterKind::smora), Matrix(5, 6), rng);
    const Checkpoint c = deserialize_checkpoint(serialize_checkpoint(m, 3));
    const json& j = c.manifest;
    CHECK(j.at("version") == kCheckpointVersion);
    CHECK(j.at("kind") == "smora");
    CHECK(j.at("d_in") == 6);
    CHECK(j.at("d_out") == 5);
    CHECK(j.at("k") == 2);
    CHECK(j.at("scaling") == 0.75);
    CHECK(j.at("u") == kDefaultUpdateRate);
    CHECK(j.at("seed") == 3);
    CHECK(j.at("tensors").size() == 5);
    CHECK(j.at("tensors")[0].at("name") == "w0");
}

TEST_CASE("corrupt checkpoints are rejected") {
    Rng rng(3);
    const Model m = make_model(spec_of(AdapterKind::lora), Matrix(5, 6), rng);
    const std::string good = serialize_checkpoint(m, 0);
    CHECK_THROWS_AS(deserialize_checkpoint(""), std::invalid_argument);
    CHECK_THROWS_AS(deserialize_checkpoint("NOTACKPT" + good.substr(8)), std::invalid_argument);
    CHECK_THROWS_AS(deserialize_checkpoint(good.substr(0, good.size() - 8)), std::invalid_argument);
    CHECK_THROWS_AS(deserialize_checkpoint(good + "extra"), std::invalid_argument);
    std::string bad_len = good;
    bad_len[8] = static_cast<char>(0xff);
    CHECK_THROWS_AS(deserialize_checkpoint(bad_len), std::invalid_argument);
}

TEST_CASE("file round trip and missing files") {
    const fs::path dir = scratch("ckpt");
    Rng rng(4);
    const Model m = make_model(spec_of(AdapterKind::hydra), Matrix(5, 6, 0.5), rng);
    save_checkpoint(dir / "m.smck", m, 12);
    const Checkpoint c = load_checkpoint(dir / "m.smck");
    CHECK(serialize_checkpoint(c.model, c.seed) == serialize_checkpoint(m, 12));
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.smck"), IoError);
    CHECK_THROWS_AS(save_checkpoint(dir / "no" / "such" / "dir" / "m.smck", m, 0), IoError);
}

}

TEST_SUITE("cli") {

TEST_CASE("config parsing is strict") {
    CHECK_NOTHROW(cli::parse_run_config(small_config()));
    json j = small_config();
    j.erase("version");
    CHECK_THROWS_AS(cli::parse_run_config(j), cli::ConfigError);
    j = small_config();
    j["version"] = 2;
    CHECK_THROWS_AS(cli::parse_run_config(j), cli::ConfigError);
    j = small_config();
    j["colour"] = "blue";
    CHECK_THROWS_AS(cli::parse_run_config(j), cli::ConfigError);
    j = small_config();
    j["train"]["seed"] = 3;
    CHECK_THROWS_AS(cli::parse_run_config(j), cli::ConfigError);
    j = small_config();
    j["sweep"]["r_totl"] = 3;
    CHECK_THROWS_AS(cli::parse_run_config(j), cli::ConfigError);
    j = small_config();
    j["train"]["steps"] = "many";
    CHECK_THROWS_AS(cli::parse_run_config(j), std::invalid_argument);
}

TEST_CASE("config defaults and round trip") {
    const cli::RunConfig d = cli::parse_run_config(json{{"version", 1}});
    CHECK(d.seed == 0);
    CHECK(d.output == "out");
    CHECK(d.train.adapter.kind == AdapterKind::smora);
    CHECK(d.sweep.r_total == 64);
    CHECK(d.sweep.r_active == 16);
    CHECK(d.sweep.seeds.size() == 5);

    const cli::RunConfig c = cli::parse_run_config(small_config(), "/base");
    CHECK(c.output == fs::path("/base/out"));
    CHECK(c.train.seed == 7);
    const cli::RunConfig back = cli::parse_run_config(cli::to_json(c));
    CHECK(cli::to_json(back) == cli::to_json(c));
}

TEST_CASE("train writes a readable checkpoint and reproducible metrics") {
    for (const char* kind : {"lora", "smora", "moe", "smear", "hydra", "moslora"}) {
        const fs::path dir = scratch(std::string("train_") + kind);
        const fs::path cfg = write_config(dir, small_config(kind));
        std::ostringstream out, err;
        REQUIRE(cli::cmd_train(cfg, out, err) == cli::kOk);
        CHECK(out.str().rfind(std::string("kind=") + kind + " avg_mse=", 0) == 0);
        const std::string metrics = slurp(dir / "out" / "metrics.json");
        const std::string ckpt = slurp(dir / "out" / "checkpoint.smck");
        const Checkpoint c = load_checkpoint(dir / "out" / "checkpoint.smck");
        CHECK(serialize_checkpoint(c.model, c.seed) == ckpt);
        CHECK(c.seed == 7);

        std::ostringstream out2, err2;
        REQUIRE(cli::cmd_train(cfg, out2, err2) == cli::kOk);
        CHECK(slurp(dir / "out" / "metrics.json") == metrics);
        CHECK(slurp(dir / "out" / "checkpoint.smck") == ckpt);
        CHECK(out2.str() == out.str());
    }
}

TEST_CASE("exit codes") {
    const fs::path dir = scratch("exit");
    std::ostringstream out, err;

    json bad = small_config();
    bad["train"]["adapter"]["k"] = 9;
    CHECK(cli::cmd_train(write_config(dir, bad), out, err) == cli::kConfigError);
    CHECK(err.str().find("k=9") != std::string::npos);

    CHECK(cli::cmd_train(dir / "nope.json", out, err) == cli::kIoError);

    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK(cli::cmd_train(dir / "broken.json", out, err) == cli::kConfigError);

    json diverge = small_config("lora");
    diverge["train"]["lr"] = 1e8;
    diverge["train"]["steps"] = 300;
    CHECK(cli::cmd_train(write_config(dir, diverge), out, err) == cli::kNumericError);

    BenchConfig b;
    b.threads = 0;
    CHECK(cli::cmd_bench(b, out, err) == cli::kConfigError);

    EquivalenceSuiteConfig e;
    e.trials = 0;
    CHECK(cli::cmd_check_equivalence(e, out, err) == cli::kConfigError);

    json unwritable = small_config();
    std::ofstream(dir / "file") << "x";
    unwritable["output"] = "file/sub";
    CHECK(cli::cmd_train(write_config(dir, unwritable), out, err) == cli::kIoError);
}

TEST_CASE("check-equivalence reports and is reproducible") {
    EquivalenceSuiteConfig e;
    e.trials = 200;
    std::ostringstream a, b, err;
    CHECK(cli::cmd_check_equivalence(e, a, err) == cli::kOk);
    CHECK(cli::cmd_check_equivalence(e, b, err) == cli::kOk);
    CHECK(a.str() == b.str());
    CHECK(a.str().rfind("trials=200 max_diff=", 0) == 0);
    CHECK(a.str().find("PASS") != std::string::npos);
}

TEST_CASE("bench prints json with matching checksums") {
    BenchConfig b;
    b.t = 32;
    b.d = 16;
    b.r = 8;
    b.k = 2;
    b.threads = 1;
    b.repeats = 1;
    std::ostringstream out, err;
    REQUIRE(cli::cmd_bench(b, out, err) == cli::kOk);
    const json j = json::parse(out.str());
    REQUIRE(j.size() == 3);
    for (const auto& r : j) CHECK(r.at("checksum") == j[0].at("checksum"));
    const BenchConfig from = cli::bench_config_from_json(json{{"t", 5}, {"dtype", "f64"}});
    CHECK(from.t == 5);
    CHECK(from.dtype == "f64");
    CHECK_THROWS_AS(cli::bench_config_from_json(json{{"tokens", 5}}), std::invalid_argument);
}

TEST_CASE("sweep and rank-ablation write their tables reproducibly") {
    const fs::path dir = scratch("sweep");
    const fs::path cfg = write_config(dir, small_config());
    std::ostringstream out, err;
    REQUIRE(cli::cmd_sweep(cfg, out, err) == cli::kOk);
    const std::string sweep = slurp(dir / "out" / "sweep.csv");
    std::istringstream lines(sweep);
    std::string line;
    std::size_t n = 0;
    std::getline(lines, line);
    CHECK(line == "expert_rank,expert_count,activate_count,seed,avg_mse");
    while (std::getline(lines, line)) ++n;
    CHECK(n == granularity_configs(8, 4).size() * 2);
    REQUIRE(cli::cmd_sweep(cfg, out, err) == cli::kOk);
    CHECK(slurp(dir / "out" / "sweep.csv") == sweep);

    REQUIRE(cli::cmd_rank_ablation(cfg, out, err) == cli::kOk);
    const std::string abl = slurp(dir / "out" / "rank_ablation.csv");
    CHECK(abl.rfind("method,k,seed,avg_mse\n", 0) == 0);
    REQUIRE(cli::cmd_rank_ablation(cfg, out, err) == cli::kOk);
    CHECK(slurp(dir / "out" / "rank_ablation.csv") == abl);
}

TEST_CASE("analyze a fresh zero-B checkpoint") {
    const fs::path dir = scratch("analyze");
    fs::create_directories(dir / "out");
    Rng rng(5);
    const Model m = make_model(spec_of(AdapterKind::smora), normal_init(5, 6, 1.0, rng), rng);
    save_checkpoint(dir / "fresh.smck", m, 0);
    json j = small_config();
    j["analyze"] = {{"checkpoint", "fresh.smck"}};
    const fs::path cfg = write_config(dir, j);
    std::ostringstream out, err;
    REQUIRE(cli::cmd_analyze(cfg, out, err) == cli::kOk);

    const Matrix& a = std::get<SmoraLayer>(m.layer).lora.a;
    const Matrix aat = dense_matmul(a, transpose(a));
    std::ostringstream expect;
    write_similarity_csv(expect, aat);
    CHECK(slurp(dir / "out" / "similarity.csv") == expect.str());
    CHECK(fs::exists(dir / "out" / "routing_histogram.csv"));
    CHECK(fs::exists(dir / "out" / "task_similarity.csv"));
    const json summary = json::parse(slurp(dir / "out" / "analysis.json"));
    CHECK(summary.is_object());

    const std::string first = slurp(dir / "out" / "routing_histogram.csv");
    REQUIRE(cli::cmd_analyze(cfg, out, err) == cli::kOk);
    CHECK(slurp(dir / "out" / "routing_histogram.csv") == first);
}

TEST_CASE("analyze after train, with the load trace") {
    const fs::path dir = scratch("analyze_trained");
    json j = small_config();
    j["analyze"] = {{"metrics", "out/metrics.json"}, {"cosine", true}};
    const fs::path cfg = write_config(dir, j);
    std::ostringstream out, err;
    REQUIRE(cli::cmd_train(cfg, out, err) == cli::kOk);
    REQUIRE(cli::cmd_analyze(cfg, out, err) == cli::kOk);
    const std::string trace = slurp(dir / "out" / "load_trace.csv");
    CHECK(trace.rfind("step,max_vio\n0,", 0) == 0);
    std::size_t lines = 0;
    for (char ch : trace) lines += ch == '\n';
    CHECK(lines == 16);
}

TEST_CASE("analyze with a missing checkpoint is an I/O error") {
    const fs::path dir = scratch("analyze_missing");
    json j = small_config();
    j["analyze"] = {{"checkpoint", "absent.smck"}};
    std::ostringstream out, err;
    CHECK(cli::cmd_analyze(write_config(dir, j), out, err) == cli::kIoError);
}

}
