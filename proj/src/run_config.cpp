#include "bisenet/run_config.hpp"

#include <fstream>
#include <sstream>

#include "bisenet/text_util.hpp"

namespace bisenet {

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint_dir.empty() ? std::filesystem::path(output_dir) / "checkpoint"
                                : std::filesystem::path(checkpoint_dir);
}

namespace {

bool apply_train_key(train::TrainConfig& t, const std::string& key,
                     const std::string& value) {
  auto as_int = [&] { return static_cast<int>(text::parse_int(value)); };
  if (key == "batch") {
    t.batch = as_int();
  } else if (key == "base_lr") {
    t.base_lr = text::parse_double(value);
  } else if (key == "momentum") {
    t.momentum = text::parse_double(value);
  } else if (key == "weight_decay") {
    t.weight_decay = text::parse_double(value);
  } else if (key == "power") {
    t.power = text::parse_double(value);
  } else if (key == "max_iter") {
    t.max_iter = as_int();
  } else if (key == "ohem") {
    t.ohem = text::parse_bool(value);
  } else if (key == "ohem_threshold") {
    t.ohem_threshold = text::parse_double(value);
  } else if (key == "ohem_min_kept") {
    t.ohem_min_kept = as_int();
  } else if (key == "ohem_aux") {
    t.ohem_aux = text::parse_bool(value);
  } else if (key == "scales") {
    t.scales.clear();
    for (const auto& s : text::split(value, ',')) t.scales.push_back(text::parse_double(s));
  } else if (key == "flip_prob") {
    t.flip_prob = text::parse_double(value);
  } else if (key == "crop_hw") {
    std::tie(t.crop_h, t.crop_w) = text::parse_hw(value);
  } else if (key == "ignore_index") {
    t.ignore_index = as_int();
  } else if (key == "seed") {
    const long long s = text::parse_int(value);
    if (s < 0) throw ConfigError("seed must be >= 0");
    t.seed = static_cast<std::uint64_t>(s);
  } else if (key == "dataset_size") {
    t.dataset_size = as_int();
  } else if (key == "checkpoint_every") {
    t.checkpoint_every = as_int();
  } else {
    return false;
  }
  return true;
}

std::vector<std::pair<std::string, std::string>> train_pairs(const train::TrainConfig& t) {
  std::string scales;
  for (std::size_t i = 0; i < t.scales.size(); ++i)
    scales += (i ? "," : "") + text::format_double(t.scales[i]);
  return {
      {"batch", std::to_string(t.batch)},
      {"base_lr", text::format_double(t.base_lr)},
      {"momentum", text::format_double(t.momentum)},
      {"weight_decay", text::format_double(t.weight_decay)},
      {"power", text::format_double(t.power)},
      {"max_iter", std::to_string(t.max_iter)},
      {"ohem", t.ohem ? "true" : "false"},
      {"ohem_threshold", text::format_double(t.ohem_threshold)},
      {"ohem_min_kept", std::to_string(t.ohem_min_kept)},
      {"ohem_aux", t.ohem_aux ? "true" : "false"},
      {"scales", scales},
      {"flip_prob", text::format_double(t.flip_prob)},
      {"crop_hw", std::to_string(t.crop_h) + "x" + std::to_string(t.crop_w)},
      {"ignore_index", std::to_string(t.ignore_index)},
      {"seed", std::to_string(t.seed)},
      {"dataset_size", std::to_string(t.dataset_size)},
      {"checkpoint_every", std::to_string(t.checkpoint_every)},
  };
}

}  // namespace

RunConfig parse_run_config(std::istream& is, const std::string& source) {
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = text::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + "expected key=value, got '" + line + "'");
    }
    const std::string key = text::trim(line.substr(0, eq));
    const std::string value = text::trim(line.substr(eq + 1));
    try {
      if (apply_arch_key(cfg.arch, key, value) ||
          apply_train_key(cfg.train, key, value)) {
        continue;
      }
      if (key == "output_dir") {
        cfg.output_dir = value;
      } else if (key == "checkpoint_dir") {
        cfg.checkpoint_dir = value;
      } else if (key == "threads") {
        cfg.threads = static_cast<int>(text::parse_int(value));
      } else if (key == "eval_size") {
        cfg.eval_size = static_cast<int>(text::parse_int(value));
      } else {
        throw ConfigError(where + "unknown key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      if (msg.rfind(where, 0) == 0) throw;
      throw ConfigError(where + "invalid value for '" + key + "': " + msg);
    }
  }
  try {
    cfg.arch.validate();
    cfg.train.validate();
    if (cfg.threads < 0) throw ConfigError("threads must be >= 0");
    if (cfg.eval_size < 0) throw ConfigError("eval_size must be >= 0");
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  return parse_run_config(is, path.string());
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "# architecture\n";
  for (const auto& [k, v] : arch_to_pairs(cfg.arch)) os << k << " = " << v << '\n';
  os << "# training\n";
  for (const auto& [k, v] : train_pairs(cfg.train)) os << k << " = " << v << '\n';
  os << "# run\n";
  os << "output_dir = " << cfg.output_dir << '\n';
  os << "checkpoint_dir = " << cfg.checkpoint_dir << '\n';
  os << "threads = " << cfg.threads << '\n';
  os << "eval_size = " << cfg.eval_size << '\n';
  return os.str();
}

}  // namespace bisenet
