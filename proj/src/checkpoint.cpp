// Copyright (c) 2026, The SMoRA Authors
// SPDX-License-Identifier: Apache-2.0

#include "smora/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <string_view>

namespace smora {

namespace {

constexpr std::string_view kMagic = "SMORACK1";

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view in) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
    return v;
}

void bad(const std::string& msg) { throw std::invalid_argument("checkpoint: " + msg); }

}  // namespace

std::string serialize_checkpoint(const Model& model, std::uint64_t seed) {
    const auto views = tensors(model);
    nlohmann::json manifest{{"format", "smora-checkpoint"},
                            {"version", kCheckpointVersion},
                            {"kind", std::string(to_string(model.spec.kind))},
                            {"adapter", to_json(model.spec)},
                            {"d_in", model.d_in()},
                            {"d_out", model.d_out()},
                            {"scaling", model.spec.scaling},
                            {"k", model.spec.k},
                            {"u", model.spec.update_rate},
                            {"seed", seed}};
    auto& list = manifest["tensors"] = nlohmann::json::array();
    for (const auto& t : views) list.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    const std::string text = manifest.dump();

    std::string out(kMagic);
    put_u64(out, text.size());
    out += text;
    for (const auto& t : views)
        for (double v : t.data) put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    std::string_view in(bytes);
    if (in.size() < kMagic.size() + 8 || in.substr(0, kMagic.size()) != kMagic) bad("missing SMORACK1 header");
    in.remove_prefix(kMagic.size());
    const std::uint64_t len = get_u64(in);
    in.remove_prefix(8);
    if (len > in.size()) bad("manifest length exceeds file size");
    Checkpoint ck;
    try {
        ck.manifest = nlohmann::json::parse(in.substr(0, len));
    } catch (const nlohmann::json::exception& e) {
        bad(std::string("manifest is not valid JSON: ") + e.what());
    }
    in.remove_prefix(len);
    const auto& mf = ck.manifest;
    try {
        if (mf.at("format") != "smora-checkpoint") bad("unexpected format tag");
        if (mf.at("version").get<std::uint32_t>() != kCheckpointVersion)
            bad("unsupported version " + mf.at("version").dump());
        const AdapterSpec spec = adapter_spec_from_json(mf.at("adapter"));
        if (mf.at("kind").get<std::string>() != to_string(spec.kind)) bad("kind does not match the adapter spec");
        const auto d_in = mf.at("d_in").get<std::size_t>();
        const auto d_out = mf.at("d_out").get<std::size_t>();
        ck.seed = mf.at("seed").get<std::uint64_t>();
        Rng scratch(0);
        ck.model = make_model(spec, Matrix(d_out, d_in), scratch);

        auto views = tensors(ck.model);
        const auto& list = mf.at("tensors");
        if (!list.is_array() || list.size() != views.size()) bad("tensor list does not match the adapter kind");
        std::size_t expected = 0;
        for (std::size_t i = 0; i < views.size(); ++i) {
            const auto& e = list[i];
            if (e.at("name").get<std::string>() != views[i].name || e.at("rows").get<std::size_t>() != views[i].rows ||
                e.at("cols").get<std::size_t>() != views[i].cols)
                bad("tensor " + std::to_string(i) + " ('" + views[i].name + "') has an unexpected name or shape");
            expected += views[i].rows * views[i].cols;
        }
        if (in.size() != expected * 8)
            bad("payload holds " + std::to_string(in.size()) + " bytes, manifest declares " +
                std::to_string(expected * 8));
        for (auto& t : views) {
            for (double& v : t.data) {
                v = std::bit_cast<double>(get_u64(in));
                in.remove_prefix(8);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        bad(std::string("malformed manifest: ") + e.what());
    }
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, std::uint64_t seed) {
    const std::string bytes = serialize_checkpoint(model, seed);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (is.bad()) throw IoError("failed reading '" + path.string() + "'");
    return deserialize_checkpoint(bytes);
}

}  // namespace smora
