#ifndef EVASION_MODEL_IO_HPP
#define EVASION_MODEL_IO_HPP

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "evasion/errors.hpp"
#include "evasion/nn.hpp"

namespace evasion {

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::json model_to_json(const Network& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : net.layers()) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t o = 0; o < layer.outputs; ++o) {
      rows.push_back(std::vector<double>(layer.weights.begin() + o * layer.inputs,
                                         layer.weights.begin() + (o + 1) * layer.inputs));
    }
    layers.push_back({{"w", std::move(rows)}, {"b", layer.bias}, {"act", to_string(layer.activation)}});
  }
  const auto& s = net.input_shape();
  return {{"version", kModelFormatVersion},
          {"input_shape", {s.channels, s.height, s.width}},
          {"layers", std::move(layers)}};
}

inline Network model_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("/", "model document must be an object");
  if (!j.contains("version")) throw ParseError("/version", "missing field");
  if (!j["version"].is_number_integer()) throw ParseError("/version", "expected integer");
  if (j["version"].get<std::int64_t>() != kModelFormatVersion) {
    throw UnsupportedVersionError(j["version"].get<std::int64_t>());
  }
  if (!j.contains("input_shape") || !j["input_shape"].is_array() || j["input_shape"].size() != 3) {
    throw ParseError("/input_shape", "expected [c,h,w]");
  }
  Shape shape;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& d = j["input_shape"][i];
    if (!d.is_number_unsigned() || d.get<std::size_t>() == 0) {
      throw ParseError("/input_shape/" + std::to_string(i), "expected positive integer");
    }
  }
  shape = Shape{j["input_shape"][0].get<std::size_t>(), j["input_shape"][1].get<std::size_t>(),
                j["input_shape"][2].get<std::size_t>()};
  if (!j.contains("layers") || !j["layers"].is_array() || j["layers"].empty()) {
    throw ParseError("/layers", "expected non-empty array");
  }

  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l < j["layers"].size(); ++l) {
    const std::string at = "/layers/" + std::to_string(l);
    const auto& lj = j["layers"][l];
    if (!lj.is_object()) throw ParseError(at, "expected object");
    for (const char* key : {"w", "b", "act"}) {
      if (!lj.contains(key)) throw ParseError(at + "/" + key, "missing field");
    }
    DenseLayer layer;
    if (!lj["act"].is_string()) throw ParseError(at + "/act", "expected string");
    try {
      layer.activation = activation_from_string(lj["act"].get<std::string>());
    } catch (const ArgumentError& e) {
      throw ParseError(at + "/act", e.what());
    }
    const auto& w = lj["w"];
    if (!w.is_array() || w.empty()) throw ParseError(at + "/w", "expected non-empty matrix");
    layer.outputs = w.size();
    for (std::size_t o = 0; o < w.size(); ++o) {
      const auto& row = w[o];
      if (!row.is_array() || row.empty()) {
        throw ParseError(at + "/w/" + std::to_string(o), "expected non-empty row");
      }
      if (o == 0) layer.inputs = row.size();
      if (row.size() != layer.inputs) {
        throw ParseError(at + "/w/" + std::to_string(o), "ragged weight matrix");
      }
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (!row[i].is_number()) {
          throw ParseError(at + "/w/" + std::to_string(o) + "/" + std::to_string(i), "expected number");
        }
        layer.weights.push_back(row[i].get<double>());
      }
    }
    const auto& b = lj["b"];
    if (!b.is_array() || b.size() != layer.outputs) {
      throw ParseError(at + "/b", "expected " + std::to_string(layer.outputs) + " biases");
    }
    for (std::size_t o = 0; o < b.size(); ++o) {
      if (!b[o].is_number()) throw ParseError(at + "/b/" + std::to_string(o), "expected number");
      layer.bias.push_back(b[o].get<double>());
    }
    layers.push_back(std::move(layer));
  }
  try {
    return Network(shape, std::move(layers));
  } catch (const DimensionError& e) {
    throw ParseError("/layers", e.what());
  }
}

inline Network parse_model(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("byte " + std::to_string(e.byte), e.what());
  }
  return model_from_json(j);
}

inline void save_model(const Network& net, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write model file " + path.string());
  out << model_to_json(net).dump() << '\n';
  if (!out) throw IoError("failed writing model file " + path.string());
}

inline Network load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read model file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_model(buf.str());
}

}  // namespace evasion

#endif  // EVASION_MODEL_IO_HPP
