#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "chaingoal/adam.hpp"
#include "chaingoal/common.hpp"
#include "chaingoal/tensor.hpp"
#include "chaingoal/trainer.hpp"

namespace chaingoal {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

// Checkpoint layout: a 4-byte little-endian manifest length, the JSON
// manifest (run config plus a name -> {offset, shape} table, offsets counted
// in floats from the payload start), then the flat float32 payload.

// Every parameter group a checkpoint carries: online policy and value nets,
// the value target copies, and the decoder when one was trained.
template <typename F>
NamedParams<F> checkpoint_params(Policy<F>& policy, ValueFunction<F>& value_fn, Mlp<F>* decoder) {
  NamedParams<F> all;
  policy.collect(all);
  value_fn.collect(all);
  value_fn.collect_target(all);
  if (decoder != nullptr) decoder->collect("decoder", all);
  return all;
}

template <typename F>
NamedParams<F> checkpoint_params(Policy<F>& policy, ValueFunction<F>& value_fn) {
  return checkpoint_params<F>(policy, value_fn, nullptr);
}

template <typename F>
void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const NamedParams<F>& params) {
  nlohmann::json table = nlohmann::json::object();
  std::vector<float> payload;
  for (const auto& [name, t] : params) {
    table[name] = {{"offset", payload.size()}, {"shape", t.shape()}};
    for (std::size_t i = 0; i < t.size(); ++i)
      payload.push_back(static_cast<float>(t.data()[i]));
  }
  nlohmann::json manifest = {{"format", 1}, {"config", config}, {"params", table}};
  std::string mtext = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  auto len = static_cast<std::uint32_t>(mtext.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) throw DataError("checkpoint: write to '" + path + "' failed");
}

struct CheckpointData {
  nlohmann::json config;
  std::vector<std::pair<std::string, std::pair<Shape, std::vector<float>>>> params;

  const std::pair<Shape, std::vector<float>>* find(const std::string& name) const {
    for (const auto& [n, entry] : params)
      if (n == name) return &entry;
    return nullptr;
  }

  bool has_group(const std::string& prefix) const {
    for (const auto& [n, entry] : params)
      if (n.rfind(prefix, 0) == 0) return true;
    return false;
  }
};

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  if (!in) throw DataError("checkpoint: '" + path + "' is truncated before the manifest");
  std::string mtext(len, '\0');
  in.read(mtext.data(), len);
  if (!in) throw DataError("checkpoint: '" + path + "' has a truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: '" + path + "' manifest is not valid JSON: " + e.what());
  }
  if (!manifest.contains("format") || manifest["format"].get<int>() != 1)
    throw DataError("checkpoint: '" + path + "' has an unsupported format tag");
  if (!manifest.contains("config") || !manifest.contains("params"))
    throw DataError("checkpoint: '" + path + "' manifest lacks config or params");

  std::vector<float> payload;
  {
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    if (bytes.size() % sizeof(float) != 0)
      throw DataError("checkpoint: '" + path + "' payload is not a whole number of floats");
    payload.resize(bytes.size() / sizeof(float));
    std::memcpy(payload.data(), bytes.data(), bytes.size());
  }

  CheckpointData data;
  data.config = manifest["config"];
  for (auto it = manifest["params"].begin(); it != manifest["params"].end(); ++it) {
    Shape shape = it.value()["shape"].get<Shape>();
    auto offset = it.value()["offset"].get<std::size_t>();
    std::size_t n = shape_numel(shape);
    if (offset + n > payload.size())
      throw DataError("checkpoint: parameter '" + it.key() + "' extends past the payload");
    data.params.emplace_back(
        it.key(), std::make_pair(std::move(shape),
                                 std::vector<float>(payload.begin() + offset,
                                                    payload.begin() + offset + n)));
  }
  return data;
}

// Copies checkpoint values into an existing parameter registry. Any missing
// name or shape difference is an error naming the offending dimensions.
template <typename F>
void restore_params(const CheckpointData& data, NamedParams<F>& into) {
  for (auto& [name, t] : into) {
    const auto* entry = data.find(name);
    if (entry == nullptr)
      throw DataError("checkpoint: missing parameter '" + name + "'");
    if (entry->first != t.shape())
      throw DataError("checkpoint: parameter '" + name + "' has shape " +
                      shape_str(entry->first) + ", the model expects " + shape_str(t.shape()));
    for (std::size_t i = 0; i < t.size(); ++i)
      t.data()[i] = static_cast<F>(entry->second[i]);
  }
}

// Rebuilds the full model bundle a checkpoint was saved from. The decoder is
// restored only when the checkpoint carries one.
template <typename F>
struct RestoredModels {
  ModelBundle<F> models;
  bool decoder_present = false;
};

template <typename F>
RestoredModels<F> restore_models(const CheckpointData& data, const TrainConfig& config) {
  RestoredModels<F> out;
  out.models = init_models<F>(config, 2, 2);
  out.decoder_present = data.has_group("decoder/");
  NamedParams<F> all = checkpoint_params(out.models.policy, out.models.value_fn,
                                         out.decoder_present ? &out.models.decoder : nullptr);
  restore_params(data, all);
  return out;
}

}  // namespace chaingoal
