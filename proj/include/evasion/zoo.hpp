#ifndef EVASION_ZOO_HPP
#define EVASION_ZOO_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evasion/dataset.hpp"
#include "evasion/errors.hpp"
#include "evasion/model_io.hpp"
#include "evasion/nn.hpp"
#include "evasion/preprocess.hpp"
#include "evasion/train.hpp"

namespace evasion {

/// Architecture and training recipe for one zoo model.
struct ModelRecipe {
  std::string name;
  std::size_t native_side = 16;  // shapes task only
  std::vector<std::size_t> hidden{64};
  Activation activation = Activation::relu;
  std::uint64_t init_seed = 0;
  std::uint64_t data_seed = 0;
  TrainConfig train;
};

enum class Task { blobs, shapes };

inline std::string task_name(Task t) { return t == Task::blobs ? "blobs" : "shapes"; }
inline Task task_from_name(const std::string& s) {
  if (s == "blobs") return Task::blobs;
  if (s == "shapes") return Task::shapes;
  throw ArgumentError("unknown task '" + s + "'");
}

struct ZooConfig {
  Task task = Task::shapes;
  std::size_t attack_side = 16;
  std::size_t n_classes = 10;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 30;
  std::uint64_t test_seed = 999;
  ShapeSpec shape_style;  // rendering knobs; size, count and seed are set per use
  ModelRecipe victim;
  std::vector<ModelRecipe> substitutes;

  /// The default shapes zoo: a 20x20-native victim behind a resize, and ten
  /// substitutes of varied width, depth and activation, two of them 20x20.
  static ZooConfig shapes_default(std::uint64_t seed = 1) {
    ZooConfig c;
    c.task = Task::shapes;
    c.attack_side = 16;
    c.n_classes = 10;
    c.train_per_class = 100;
    c.test_per_class = 30;
    c.test_seed = seed * 1000 + 999;
    auto recipe = [&](std::string name, std::size_t side, std::vector<std::size_t> hidden,
                      Activation act, std::uint64_t k) {
      ModelRecipe r;
      r.name = std::move(name);
      r.native_side = side;
      r.hidden = std::move(hidden);
      r.activation = act;
      r.init_seed = seed * 100 + k;
      r.data_seed = seed * 100 + 50 + k;
      r.train = TrainConfig{0.1, 60, 16, seed * 100 + 25 + k};
      return r;
    };
    c.victim = recipe("victim", 20, {64, 32}, Activation::relu, 0);
    c.substitutes = {
        recipe("sub01", 16, {64}, Activation::relu, 1),
        recipe("sub02", 16, {32}, Activation::relu, 2),
        recipe("sub03", 16, {64, 32}, Activation::relu, 3),
        recipe("sub04", 16, {48}, Activation::tanh, 4),
        recipe("sub05", 20, {64}, Activation::relu, 5),
        recipe("sub06", 16, {96}, Activation::relu, 6),
        recipe("sub07", 16, {32, 32}, Activation::tanh, 7),
        recipe("sub08", 16, {128}, Activation::relu, 8),
        recipe("sub09", 20, {48, 24}, Activation::relu, 9),
        recipe("sub10", 16, {24}, Activation::relu, 10),
    };
    return c;
  }

  /// 2-D three-blob zoo: victim and ten substitute MLPs, all on (1,1,2).
  static ZooConfig blobs_default(std::uint64_t seed = 1) {
    ZooConfig c;
    c.task = Task::blobs;
    c.attack_side = 0;
    c.n_classes = 3;
    c.train_per_class = 100;
    c.test_per_class = 50;
    c.test_seed = seed * 1000 + 999;
    for (std::uint64_t k = 0; k <= 10; ++k) {
      ModelRecipe r;
      r.name = k == 0 ? "victim" : (k < 10 ? "sub0" : "sub") + std::to_string(k);
      r.hidden = (k % 3 == 0) ? std::vector<std::size_t>{32, 32} : std::vector<std::size_t>{16 + 8 * (k % 4)};
      r.activation = (k % 4 == 3) ? Activation::tanh : Activation::relu;
      r.init_seed = seed * 100 + k;
      r.data_seed = seed * 100 + 50 + k;
      r.train = TrainConfig{0.1, 60, 16, seed * 100 + 25 + k};
      if (k == 0) c.victim = r;
      else c.substitutes.push_back(r);
    }
    return c;
  }
};

inline LabeledDataset task_dataset(const ZooConfig& cfg, std::size_t side, std::size_t per_class,
                                   std::uint64_t seed) {
  if (cfg.task == Task::blobs) {
    BlobSpec spec;
    spec.n_classes = cfg.n_classes;
    spec.points_per_class = per_class;
    spec.seed = seed;
    return make_blobs(spec);
  }
  ShapeSpec spec = cfg.shape_style;
  spec.n_classes = cfg.n_classes;
  spec.image_side = side;
  spec.samples_per_class = per_class;
  spec.seed = seed;
  return make_shapes(spec);
}

struct ZooModel {
  std::string name;
  std::string role;  // "victim" or "substitute"
  std::shared_ptr<const Network> network;
  double heldout_accuracy = 0.0;
};

struct Zoo {
  ZooConfig config;
  Shape attack_shape;
  ZooModel victim;
  std::vector<ZooModel> substitutes;

  /// Held-out images in attack space.
  LabeledDataset test_set() const {
    const std::size_t side = config.attack_side;
    return task_dataset(config, side, config.test_per_class, config.test_seed);
  }

  /// Substitutes sorted by held-out accuracy, best first (stable on ties).
  std::vector<ZooModel> substitutes_by_accuracy() const {
    std::vector<ZooModel> out = substitutes;
    std::stable_sort(out.begin(), out.end(), [](const ZooModel& a, const ZooModel& b) {
      return a.heldout_accuracy > b.heldout_accuracy;
    });
    return out;
  }
};

inline ZooModel train_zoo_model(const ZooConfig& cfg, const ModelRecipe& r, std::string role) {
  const std::size_t side = cfg.task == Task::blobs ? 0 : r.native_side;
  LabeledDataset train = task_dataset(cfg, side, cfg.train_per_class, r.data_seed);
  LabeledDataset test = task_dataset(cfg, side, cfg.test_per_class, cfg.test_seed);
  Network net = make_mlp(train.input_shape, r.hidden, cfg.n_classes, r.activation, r.init_seed);
  try {
    net = train_sgd(std::move(net), train, r.train);
  } catch (const ArgumentError& e) {
    throw ArgumentError("training " + r.name + " failed: " + e.what());
  }
  ZooModel m;
  m.name = r.name;
  m.role = std::move(role);
  m.heldout_accuracy = accuracy(net, test);
  m.network = std::make_shared<const Network>(std::move(net));
  return m;
}

inline Zoo build_zoo(const ZooConfig& cfg) {
  Zoo zoo;
  zoo.config = cfg;
  zoo.attack_shape = cfg.task == Task::blobs ? Shape{1, 1, 2} : Shape{1, cfg.attack_side, cfg.attack_side};
  zoo.victim = train_zoo_model(cfg, cfg.victim, "victim");
  for (const auto& r : cfg.substitutes) zoo.substitutes.push_back(train_zoo_model(cfg, r, "substitute"));
  return zoo;
}

inline nlohmann::json recipe_json(const ModelRecipe& r) {
  return {{"name", r.name},
          {"native_side", r.native_side},
          {"hidden", r.hidden},
          {"activation", to_string(r.activation)},
          {"init_seed", r.init_seed},
          {"data_seed", r.data_seed},
          {"train", {{"learning_rate", r.train.learning_rate}, {"epochs", r.train.epochs},
                     {"batch_size", r.train.batch_size}, {"seed", r.train.seed},
                     {"momentum", r.train.momentum}}}};
}

inline ModelRecipe recipe_from_json(const nlohmann::json& j) {
  ModelRecipe r;
  r.name = j.at("name").get<std::string>();
  r.native_side = j.at("native_side").get<std::size_t>();
  r.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  r.activation = activation_from_string(j.at("activation").get<std::string>());
  r.init_seed = j.at("init_seed").get<std::uint64_t>();
  r.data_seed = j.at("data_seed").get<std::uint64_t>();
  const auto& t = j.at("train");
  r.train = TrainConfig{t.at("learning_rate").get<double>(), t.at("epochs").get<int>(),
                        t.at("batch_size").get<std::size_t>(), t.at("seed").get<std::uint64_t>(),
                        t.value("momentum", 0.0)};
  return r;
}

inline nlohmann::json zoo_config_json(const ZooConfig& c) {
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& r : c.substitutes) subs.push_back(recipe_json(r));
  return {{"task", task_name(c.task)},           {"attack_side", c.attack_side},
          {"n_classes", c.n_classes},            {"train_per_class", c.train_per_class},
          {"test_per_class", c.test_per_class},  {"test_seed", c.test_seed},
          {"shape_style",
           {{"background_min", c.shape_style.background_min},
            {"background_max", c.shape_style.background_max},
            {"contrast_min", c.shape_style.contrast_min},
            {"contrast_max", c.shape_style.contrast_max},
            {"noise_sigma", c.shape_style.noise_sigma},
            {"position_jitter", c.shape_style.position_jitter},
            {"scale_min", c.shape_style.scale_min},
            {"scale_max", c.shape_style.scale_max},
            {"dark_fraction", c.shape_style.dark_fraction},
            {"texture_amplitude", c.shape_style.texture_amplitude},
            {"texture_frequency", c.shape_style.texture_frequency}}},
          {"victim", recipe_json(c.victim)},     {"substitutes", subs}};
}

inline ZooConfig zoo_config_from_json(const nlohmann::json& j) {
  try {
    ZooConfig c;
    c.task = task_from_name(j.at("task").get<std::string>());
    c.attack_side = j.at("attack_side").get<std::size_t>();
    c.n_classes = j.at("n_classes").get<std::size_t>();
    c.train_per_class = j.at("train_per_class").get<std::size_t>();
    c.test_per_class = j.at("test_per_class").get<std::size_t>();
    c.test_seed = j.at("test_seed").get<std::uint64_t>();
    if (j.contains("shape_style")) {
      const auto& st = j.at("shape_style");
      c.shape_style.background_min = st.at("background_min").get<double>();
      c.shape_style.background_max = st.at("background_max").get<double>();
      c.shape_style.contrast_min = st.at("contrast_min").get<double>();
      c.shape_style.contrast_max = st.at("contrast_max").get<double>();
      c.shape_style.noise_sigma = st.at("noise_sigma").get<double>();
      c.shape_style.position_jitter = st.at("position_jitter").get<double>();
      c.shape_style.scale_min = st.at("scale_min").get<double>();
      c.shape_style.scale_max = st.at("scale_max").get<double>();
      c.shape_style.dark_fraction = st.at("dark_fraction").get<double>();
      c.shape_style.texture_amplitude = st.at("texture_amplitude").get<double>();
      c.shape_style.texture_frequency = st.at("texture_frequency").get<double>();
    }
    c.victim = recipe_from_json(j.at("victim"));
    for (const auto& s : j.at("substitutes")) c.substitutes.push_back(recipe_from_json(s));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("zoo config", e.what());
  }
}

/// Manifest listing every model with its held-out accuracy.
inline nlohmann::json zoo_manifest(const Zoo& zoo) {
  nlohmann::json models = nlohmann::json::array();
  auto add = [&](const ZooModel& m) {
    const auto& s = m.network->input_shape();
    models.push_back({{"name", m.name},
                      {"role", m.role},
                      {"file", m.name + ".json"},
                      {"input_shape", {s.channels, s.height, s.width}},
                      {"accuracy", m.heldout_accuracy}});
  };
  add(zoo.victim);
  for (const auto& m : zoo.substitutes) add(m);
  return {{"config", zoo_config_json(zoo.config)}, {"models", models}};
}

inline void save_zoo(const Zoo& zoo, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create zoo directory " + dir.string() + ": " + ec.message());
  save_model(*zoo.victim.network, dir / (zoo.victim.name + ".json"));
  for (const auto& m : zoo.substitutes) save_model(*m.network, dir / (m.name + ".json"));
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << zoo_manifest(zoo).dump(2) << '\n';
}

inline Zoo load_zoo(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no zoo manifest in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("manifest.json byte " + std::to_string(e.byte), e.what());
  }
  Zoo zoo;
  zoo.config = zoo_config_from_json(j.at("config"));
  zoo.attack_shape = zoo.config.task == Task::blobs
                         ? Shape{1, 1, 2}
                         : Shape{1, zoo.config.attack_side, zoo.config.attack_side};
  for (const auto& m : j.at("models")) {
    ZooModel zm;
    zm.name = m.at("name").get<std::string>();
    zm.role = m.at("role").get<std::string>();
    zm.heldout_accuracy = m.at("accuracy").get<double>();
    zm.network = std::make_shared<const Network>(load_model(dir / m.at("file").get<std::string>()));
    if (zm.role == "victim") zoo.victim = std::move(zm);
    else zoo.substitutes.push_back(std::move(zm));
  }
  if (!zoo.victim.network) throw ParseError("manifest.json/models", "no victim model");
  return zoo;
}

/// Loads the zoo cached in `dir` when its recorded config matches `cfg`,
/// otherwise trains it and writes the cache.
inline Zoo load_or_build_zoo(const ZooConfig& cfg, const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir / "manifest.json")) {
    try {
      Zoo zoo = load_zoo(dir);
      if (zoo_config_json(zoo.config) == zoo_config_json(cfg)) return zoo;
    } catch (const std::exception&) {
      // stale or corrupt cache: rebuild below
    }
  }
  Zoo zoo = build_zoo(cfg);
  save_zoo(zoo, dir);
  return zoo;
}

}  // namespace evasion

#endif  // EVASION_ZOO_HPP
