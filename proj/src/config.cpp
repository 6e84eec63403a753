#include <fstream>
#include <set>

#include <json.hpp>

#include "ofit/common.hpp"
#include "ofit/harness.hpp"

namespace ofit {

using nlohmann::json;

void Schedules::validate() const {
  auto check_schedule = [](const std::vector<double>& v, const char* name,
                           bool needs_zero) {
    if (v.empty()) {
      throw ConfigError(std::string("schedules.") + name + " must be nonempty");
    }
    for (size_t i = 1; i < v.size(); ++i) {
      if (!(v[i] > v[i - 1])) {
        throw ConfigError(std::string("schedules.") + name +
                          " must be strictly increasing");
      }
    }
    if (needs_zero && v.front() != 0.0) {
      throw ConfigError(std::string("schedules.") + name +
                        " must start at level 0");
    }
    if (v.front() < 0.0) {
      throw ConfigError(std::string("schedules.") + name +
                        " must be nonnegative");
    }
  };
  check_schedule(noise_levels, "noise_levels", true);
  if (noise_levels.back() > 1.0) {
    throw ConfigError("schedules.noise_levels must stay within [0,1]");
  }
  check_schedule(fgsm_eps, "fgsm_eps", true);
  check_schedule(alphas, "alphas", true);
  check_schedule(gaussian_eps, "gaussian_eps", true);
  if (severities.empty()) {
    throw ConfigError("schedules.severities must be nonempty");
  }
  for (size_t i = 0; i < severities.size(); ++i) {
    if (severities[i] < 1 || severities[i] > 5) {
      throw ConfigError("schedules.severities entries must be in 1..5");
    }
    if (i > 0 && severities[i] <= severities[i - 1]) {
      throw ConfigError("schedules.severities must be strictly increasing");
    }
  }
  if (shift_step < 1) throw ConfigError("schedules.shift_step must be >= 1");
  if (angle_step_divisor <= 0.0) {
    throw ConfigError("schedules.angle_step_divisor must be positive");
  }
  if (sweep_eval_count < 0) {
    throw ConfigError("schedules.sweep_eval_count must be nonnegative");
  }
}

void ExperimentConfig::validate() const {
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw ConfigError("split_fraction must be in (0,1)");
  }
  if (!(reduced_fraction > 0.0 && reduced_fraction <= 1.0)) {
    throw ConfigError("reduced_fraction must be in (0,1]");
  }
  if (pool.empty()) throw ConfigError("pool must contain at least one entry");
  std::set<std::string> ids;
  for (const PoolEntry& e : pool) {
    if (e.id.empty() || e.id.find(',') != std::string::npos ||
        e.id.find('\n') != std::string::npos) {
      throw ConfigError("pool ids must be nonempty and free of commas");
    }
    if (!ids.insert(e.id).second) {
      throw ConfigError("duplicate pool id: " + e.id);
    }
    try {
      e.config.validate();
    } catch (const std::exception& ex) {
      throw ConfigError("pool entry " + e.id + ": " + ex.what());
    }
  }
  if (seeds.empty()) throw ConfigError("seeds must be nonempty");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  schedules.validate();
}

namespace {

void require_keys(const json& obj, const std::set<std::string>& allowed,
                  const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

template <typename T>
void maybe(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + name + "'");
}

const char* optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::sgd_momentum: return "sgd_momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "sgd";
}

void apply_training_overrides(const json& obj, TrainingConfig& cfg,
                              const std::string& where) {
  require_keys(obj,
               {"optimizer", "momentum", "beta1", "beta2", "adam_eps",
                "learning_rate", "lr_decay", "l2_lambda", "batch_size", "epochs",
                "dropout_rate", "use_batchnorm", "use_augmentation",
                "normalize_inputs", "augment", "seed"},
               where);
  if (obj.contains("optimizer")) {
    cfg.optimizer = parse_optimizer(obj.at("optimizer").get<std::string>());
  }
  maybe(obj, "momentum", cfg.momentum);
  maybe(obj, "beta1", cfg.beta1);
  maybe(obj, "beta2", cfg.beta2);
  maybe(obj, "adam_eps", cfg.adam_eps);
  maybe(obj, "learning_rate", cfg.learning_rate);
  maybe(obj, "lr_decay", cfg.lr_decay);
  maybe(obj, "l2_lambda", cfg.l2_lambda);
  maybe(obj, "batch_size", cfg.batch_size);
  maybe(obj, "epochs", cfg.epochs);
  maybe(obj, "dropout_rate", cfg.dropout_rate);
  maybe(obj, "use_batchnorm", cfg.use_batchnorm);
  maybe(obj, "use_augmentation", cfg.use_augmentation);
  maybe(obj, "normalize_inputs", cfg.normalize_inputs);
  maybe(obj, "seed", cfg.seed);
  if (obj.contains("augment")) {
    const json& aug = obj.at("augment");
    require_keys(aug, {"max_shift", "max_rotate", "flip_prob"}, where + ".augment");
    maybe(aug, "max_shift", cfg.augment.max_shift);
    maybe(aug, "max_rotate", cfg.augment.max_rotate);
    maybe(aug, "flip_prob", cfg.augment.flip_prob);
  }
}

PoolEntry parse_pool_entry(const json& obj) {
  require_keys(obj,
               {"id", "family", "regularized", "capacity", "train_size",
                "overrides"},
               "pool entry");
  PoolEntry entry;
  entry.id = obj.at("id").get<std::string>();
  const std::string family = obj.value("family", std::string("conv_plain"));
  if (family == "conv_plain") {
    entry.spec.family = ArchFamily::conv_plain;
  } else if (family == "conv_residual") {
    entry.spec.family = ArchFamily::conv_residual;
  } else {
    throw ConfigError("unknown family '" + family + "' in pool entry " + entry.id);
  }
  entry.spec.regularized = obj.value("regularized", false);
  const std::string cap = obj.value("capacity", std::string("small"));
  if (cap == "small") {
    entry.spec.capacity = Capacity::small;
  } else if (cap == "large") {
    entry.spec.capacity = Capacity::large;
  } else {
    throw ConfigError("unknown capacity '" + cap + "' in pool entry " + entry.id);
  }
  const std::string size = obj.value("train_size", std::string("full"));
  if (size == "full") {
    entry.spec.train_size = TrainSize::full;
  } else if (size == "reduced") {
    entry.spec.train_size = TrainSize::reduced;
  } else {
    throw ConfigError("unknown train_size '" + size + "' in pool entry " +
                      entry.id);
  }
  entry.config = default_training_config(entry.spec);
  if (obj.contains("overrides")) {
    apply_training_overrides(obj.at("overrides"), entry.config,
                             "pool entry " + entry.id + " overrides");
  }
  return entry;
}

}  // namespace

namespace {

ExperimentConfig load_config_impl(const json& root);

}  // namespace

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  try {
    return load_config_impl(root);
  } catch (const json::exception& e) {
    throw ConfigError("config error in " + path + ": " + e.what());
  }
}

namespace {

ExperimentConfig load_config_impl(const json& root) {
  require_keys(root,
               {"dataset", "split_fraction", "reduced_fraction", "split_seed",
                "pool", "schedules", "seeds", "workers", "output_dir"},
               "config root");

  ExperimentConfig cfg;
  if (!root.contains("dataset")) throw ConfigError("config needs a dataset");
  {
    const json& ds = root.at("dataset");
    require_keys(ds,
                 {"kind", "classes", "per_class", "image_side", "jitter", "seed",
                  "images", "labels", "files", "limit"},
                 "dataset");
    const std::string kind = ds.value("kind", std::string("synthetic"));
    if (kind == "synthetic") {
      cfg.dataset.kind = DatasetSourceConfig::Kind::synthetic;
      maybe(ds, "classes", cfg.dataset.classes);
      maybe(ds, "per_class", cfg.dataset.per_class);
      maybe(ds, "image_side", cfg.dataset.image_side);
      maybe(ds, "jitter", cfg.dataset.jitter);
      maybe(ds, "seed", cfg.dataset.seed);
    } else if (kind == "mnist") {
      cfg.dataset.kind = DatasetSourceConfig::Kind::mnist;
      cfg.dataset.images_path = ds.at("images").get<std::string>();
      cfg.dataset.labels_path = ds.at("labels").get<std::string>();
    } else if (kind == "cifar10") {
      cfg.dataset.kind = DatasetSourceConfig::Kind::cifar10;
      cfg.dataset.files = ds.at("files").get<std::vector<std::string>>();
    } else {
      throw ConfigError("unknown dataset kind '" + kind + "'");
    }
    maybe(ds, "limit", cfg.dataset.limit);
  }

  maybe(root, "split_fraction", cfg.split_fraction);
  maybe(root, "reduced_fraction", cfg.reduced_fraction);
  maybe(root, "split_seed", cfg.split_seed);

  if (!root.contains("pool")) throw ConfigError("config needs a pool");
  for (const json& entry : root.at("pool")) {
    cfg.pool.push_back(parse_pool_entry(entry));
  }

  if (root.contains("schedules")) {
    const json& sc = root.at("schedules");
    require_keys(sc,
                 {"noise_levels", "fgsm_eps", "alphas", "gaussian_eps",
                  "severities", "spatial_mode", "shift_step",
                  "angle_step_divisor", "sweep_eval_count"},
                 "schedules");
    maybe(sc, "noise_levels", cfg.schedules.noise_levels);
    maybe(sc, "fgsm_eps", cfg.schedules.fgsm_eps);
    maybe(sc, "alphas", cfg.schedules.alphas);
    maybe(sc, "gaussian_eps", cfg.schedules.gaussian_eps);
    maybe(sc, "severities", cfg.schedules.severities);
    if (sc.contains("spatial_mode")) {
      const std::string mode = sc.at("spatial_mode").get<std::string>();
      if (mode == "worst_case") {
        cfg.schedules.spatial_mode = SpatialMode::worst_case;
      } else if (mode == "random") {
        cfg.schedules.spatial_mode = SpatialMode::random;
      } else {
        throw ConfigError("unknown spatial_mode '" + mode + "'");
      }
    }
    maybe(sc, "shift_step", cfg.schedules.shift_step);
    maybe(sc, "angle_step_divisor", cfg.schedules.angle_step_divisor);
    maybe(sc, "sweep_eval_count", cfg.schedules.sweep_eval_count);
  }

  maybe(root, "seeds", cfg.seeds);
  maybe(root, "workers", cfg.workers);
  maybe(root, "output_dir", cfg.output_dir);

  cfg.validate();
  return cfg;
}

}  // namespace

std::string config_to_json(const ExperimentConfig& cfg) {
  json root;
  json ds;
  switch (cfg.dataset.kind) {
    case DatasetSourceConfig::Kind::synthetic:
      ds["kind"] = "synthetic";
      ds["classes"] = cfg.dataset.classes;
      ds["per_class"] = cfg.dataset.per_class;
      ds["image_side"] = cfg.dataset.image_side;
      ds["jitter"] = cfg.dataset.jitter;
      ds["seed"] = cfg.dataset.seed;
      break;
    case DatasetSourceConfig::Kind::mnist:
      ds["kind"] = "mnist";
      ds["images"] = cfg.dataset.images_path;
      ds["labels"] = cfg.dataset.labels_path;
      break;
    case DatasetSourceConfig::Kind::cifar10:
      ds["kind"] = "cifar10";
      ds["files"] = cfg.dataset.files;
      break;
  }
  if (cfg.dataset.limit > 0) ds["limit"] = cfg.dataset.limit;
  root["dataset"] = ds;
  root["split_fraction"] = cfg.split_fraction;
  root["reduced_fraction"] = cfg.reduced_fraction;
  root["split_seed"] = cfg.split_seed;

  json pool = json::array();
  for (const PoolEntry& e : cfg.pool) {
    json entry;
    entry["id"] = e.id;
    entry["family"] =
        e.spec.family == ArchFamily::conv_plain ? "conv_plain" : "conv_residual";
    entry["regularized"] = e.spec.regularized;
    entry["capacity"] = e.spec.capacity == Capacity::small ? "small" : "large";
    entry["train_size"] =
        e.spec.train_size == TrainSize::full ? "full" : "reduced";
    json ov;
    ov["optimizer"] = optimizer_name(e.config.optimizer);
    ov["momentum"] = e.config.momentum;
    ov["beta1"] = e.config.beta1;
    ov["beta2"] = e.config.beta2;
    ov["adam_eps"] = e.config.adam_eps;
    ov["learning_rate"] = e.config.learning_rate;
    ov["lr_decay"] = e.config.lr_decay;
    ov["l2_lambda"] = e.config.l2_lambda;
    ov["batch_size"] = e.config.batch_size;
    ov["epochs"] = e.config.epochs;
    ov["dropout_rate"] = e.config.dropout_rate;
    ov["use_batchnorm"] = e.config.use_batchnorm;
    ov["use_augmentation"] = e.config.use_augmentation;
    ov["normalize_inputs"] = e.config.normalize_inputs;
    ov["augment"] = {{"max_shift", e.config.augment.max_shift},
                     {"max_rotate", e.config.augment.max_rotate},
                     {"flip_prob", e.config.augment.flip_prob}};
    entry["overrides"] = ov;
    pool.push_back(entry);
  }
  root["pool"] = pool;

  json sc;
  sc["noise_levels"] = cfg.schedules.noise_levels;
  sc["fgsm_eps"] = cfg.schedules.fgsm_eps;
  sc["alphas"] = cfg.schedules.alphas;
  sc["gaussian_eps"] = cfg.schedules.gaussian_eps;
  sc["severities"] = cfg.schedules.severities;
  sc["spatial_mode"] = cfg.schedules.spatial_mode == SpatialMode::worst_case
                           ? "worst_case"
                           : "random";
  sc["shift_step"] = cfg.schedules.shift_step;
  sc["angle_step_divisor"] = cfg.schedules.angle_step_divisor;
  sc["sweep_eval_count"] = cfg.schedules.sweep_eval_count;
  root["schedules"] = sc;

  root["seeds"] = cfg.seeds;
  root["workers"] = cfg.workers;
  root["output_dir"] = cfg.output_dir;
  return root.dump(2);
}

}  // namespace ofit
