// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cstring>
#include <fstream>

#include "polyglot/corpus.hpp"
#include "polyglot/model.hpp"

namespace polyglot {
namespace {

constexpr const char* kFormat = "polyglot-checkpoint-v1";

static_assert(std::endian::native == std::endian::little, "params.bin is written in host order; little-endian only");

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const CheckpointMeta& meta) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw ModelError("cannot write " + (dir / "params.bin").string());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : model.parameters()) {
    const auto d = t.data();
    bin.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += d.size() * sizeof(float);
  }
  bin.close();
  if (!bin) throw ModelError("failed writing " + (dir / "params.bin").string());
  nlohmann::json manifest = {{"format", kFormat},
                             {"model_config", model.config().to_json()},
                             {"allocation", model.allocation().to_json()},
                             {"metadata",
                              {{"vocab_size", meta.vocab_size},
                               {"vocab_fingerprint", meta.vocab_fingerprint},
                               {"extra", meta.extra}}},
                             {"total_bytes", offset},
                             {"tensors", tensors}};
  write_json_file(dir / "manifest.json", manifest);
}

Model load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta) {
  const auto manifest_path = dir / "manifest.json";
  const auto bin_path = dir / "params.bin";
  if (!std::filesystem::exists(manifest_path)) throw ModelError("checkpoint manifest not found: " + manifest_path.string());
  if (!std::filesystem::exists(bin_path)) throw ModelError("checkpoint parameters not found: " + bin_path.string());
  const auto manifest = read_json_file(manifest_path);
  if (manifest.value("format", "") != kFormat) throw ModelError("unsupported checkpoint format in " + manifest_path.string());

  const auto config = ModelConfig::from_json(manifest.at("model_config"));
  ExpertAllocation alloc;
  if (manifest.contains("allocation") && !manifest["allocation"].at("per_pl").empty()) {
    alloc = ExpertAllocation::from_json(manifest["allocation"]);
  }
  Model model(config, alloc, 0);

  const auto params = model.parameters();
  const auto& entries = manifest.at("tensors");
  if (entries.size() != params.size()) {
    throw ModelError("checkpoint lists " + std::to_string(entries.size()) + " tensors, model expects " +
                     std::to_string(params.size()));
  }
  std::uint64_t expected_bytes = 0;
  for (const auto& [_, t] : params) expected_bytes += t.size() * sizeof(float);
  const auto actual_bytes = std::filesystem::file_size(bin_path);
  if (actual_bytes != expected_bytes) {
    throw ModelError("params.bin is " + std::to_string(actual_bytes) + " bytes, manifest implies " +
                     std::to_string(expected_bytes));
  }
  std::ifstream bin(bin_path, std::ios::binary);
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    auto [name, t] = params[i];
    if (e.at("name").get<std::string>() != name) {
      throw ModelError("checkpoint tensor " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                       "', expected '" + name + "'");
    }
    if (e.at("shape").get<Shape>() != t.shape()) {
      throw ModelError("shape mismatch for " + name + ": checkpoint " + shape_str(e.at("shape").get<Shape>()) +
                       ", model " + shape_str(t.shape()));
    }
    if (e.at("offset").get<std::uint64_t>() != offset) throw ModelError("bad offset for " + name);
    auto d = t.mutable_data();
    bin.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
    if (!bin) throw ModelError("truncated read of " + name);
    offset += d.size() * sizeof(float);
  }
  if (meta) {
    const auto& m = manifest.at("metadata");
    meta->vocab_size = m.value("vocab_size", std::size_t{0});
    meta->vocab_fingerprint = m.value("vocab_fingerprint", std::uint64_t{0});
    meta->extra = m.value("extra", nlohmann::json::object());
  }
  return model;
}

}  // namespace polyglot
