#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "usvkit/nn/model.hpp"

namespace usv::nn {

static_assert(std::endian::native == std::endian::little, "model container assumes a little-endian host");

/// Container layout: 8-byte magic, u64 header length, JSON header (layer
/// list, tensor names/shapes, free-form metadata), then every weight and
/// buffer as little-endian float64 in header order.
inline constexpr char kModelMagic[8] = {'U', 'S', 'V', 'K', 'M', 'D', 'L', '1'};

struct ModelBundle {
  Model model;
  nlohmann::json meta;
};

inline void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta = {}) {
  nlohmann::json header;
  header["layers"] = model.layers();
  auto describe = [](const std::vector<std::string>& names, const std::vector<Tensor>& ts) {
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t i = 0; i < ts.size(); ++i) arr.push_back({{"name", names[i]}, {"shape", ts[i].shape}});
    return arr;
  };
  header["weights"] = describe(model.weight_names(), model.weights());
  header["buffers"] = describe(model.buffer_names(), model.buffers());
  header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write model file " + path.string());
  out.write(kModelMagic, 8);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto* group : {&model.weights(), &model.buffers()})
    for (const auto& t : *group)
      out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed for model file " + path.string());
}

inline ModelBundle load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || std::memcmp(magic, kModelMagic, 8) != 0) throw std::runtime_error("not a usvkit model file: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated model header in " + path.string());
  const auto header = nlohmann::json::parse(text);

  Model model(header.at("layers").get<std::vector<LayerSpec>>());
  auto fill = [&](std::vector<Tensor>& ts, const nlohmann::json& desc, const char* what) {
    if (desc.size() != ts.size()) throw std::runtime_error(std::string("model file ") + what + " count mismatch");
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (desc[i].at("shape").get<std::vector<int>>() != ts[i].shape)
        throw std::runtime_error("model file shape mismatch for " + desc[i].at("name").get<std::string>());
      in.read(reinterpret_cast<char*>(ts[i].ptr()), static_cast<std::streamsize>(ts[i].numel() * sizeof(double)));
    }
  };
  fill(model.mutable_weights(), header.at("weights"), "weight");
  fill(model.mutable_buffers(), header.at("buffers"), "buffer");
  if (!in) throw std::runtime_error("truncated model data in " + path.string());
  model.set_mode(Mode::Eval);
  return {std::move(model), header.value("meta", nlohmann::json::object())};
}

}  // namespace usv::nn
