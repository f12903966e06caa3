#include "mop/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace mop {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + key + "' is not a number: " + v);
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("'" + key + "' is not a non-negative integer: " + v);
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "' is not a boolean: " + v);
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, p);
}

ConfigFile ConfigFile::parse(const std::string& text) {
  ConfigFile cfg;
  std::stringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ParseError("unterminated section header", lineno);
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) throw ParseError("empty section name", lineno);
      cfg.data_[section];
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", lineno);
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ParseError("empty key", lineno);
    cfg.data_[section][key] = trim(t.substr(eq + 1));
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ConfigFile::serialize() const {
  std::string out;
  for (const auto& [section, kv] : data_) {
    if (!section.empty()) {
      if (!out.empty()) out += '\n';
      out += "[" + section + "]\n";
    }
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  }
  return out;
}

void ConfigFile::set(const std::string& section, const std::string& key, const std::string& value) {
  data_[section][key] = value;
}

std::optional<std::string> ConfigFile::get(const std::string& section, const std::string& key) const {
  auto s = data_.find(section);
  if (s == data_.end()) return std::nullopt;
  auto k = s->second.find(key);
  if (k == s->second.end()) return std::nullopt;
  return k->second;
}

PipelineConfig PipelineConfig::from_config(const ConfigFile& file) {
  PipelineConfig c;
  auto& t = c.train;
  auto seed = file.get("run", "seed");
  if (!seed) throw ConfigError("[run] seed is required");
  t.seed = to_uint("seed", *seed);

  for (const auto& [section, kv] : file.sections()) {
    for (const auto& [key, v] : kv) {
      const std::string id = section + "." + key;
      if (section == "data" && key == "domains") {
        c.domains.clear();
        for (const auto& p : split_list(v)) c.domains.emplace_back(p);
      } else if (section == "data" && key == "overlap") {
        c.overlaps.clear();
        for (const auto& item : split_list(v)) {
          const auto c1 = item.find(':');
          const auto c2 = c1 == std::string::npos ? c1 : item.find(':', c1 + 1);
          if (c2 == std::string::npos) throw ConfigError("overlap entries look like a:b:path, got " + item);
          c.overlaps.push_back({static_cast<int>(to_uint(id, item.substr(0, c1))),
                                static_cast<int>(to_uint(id, item.substr(c1 + 1, c2 - c1 - 1))), item.substr(c2 + 1)});
        }
      } else if (section == "data" && key == "out") {
        c.out = v;
      } else if (section == "model" && key == "dim") {
        t.dim = to_uint(id, v);
      } else if (section == "model" && key == "heads") {
        t.heads = to_uint(id, v);
      } else if (section == "model" && key == "hyper_layers") {
        t.hyper_layers = to_uint(id, v);
      } else if (section == "model" && key == "mode_layers") {
        t.mode_layers = to_uint(id, v);
      } else if (section == "model" && key == "motif") {
        t.motif = parse_motif_selection(v);
      } else if (section == "model" && key == "walk_lengths") {
        t.walk_lengths.clear();
        for (const auto& p : split_list(v)) t.walk_lengths.push_back(to_uint(id, p));
      } else if (section == "model" && key == "motif_budget") {
        t.motif_budget = to_uint(id, v);
      } else if (section == "model" && key == "lambda_f") {
        t.lambda_f = to_double(id, v);
      } else if (section == "model" && key == "merge_hyperedges") {
        t.merge_hyperedges = to_bool(id, v);
      } else if (section == "model" && key == "prompt") {
        t.prompt = parse_prompt_mode(v);
      } else if (section == "model" && key == "init_scale") {
        t.init_scale = to_double(id, v);
      } else if (section == "train" && key == "tau") {
        t.tau = to_double(id, v);
      } else if (section == "train" && key == "lambda1") {
        t.lambda1 = to_double(id, v);
      } else if (section == "train" && key == "lr") {
        t.lr = to_double(id, v);
      } else if (section == "train" && key == "tune_lr") {
        t.tune_lr = to_double(id, v);
      } else if (section == "train" && key == "optimizer") {
        t.optimizer = parse_optimizer(v);
      } else if (section == "train" && key == "batch") {
        t.batch = to_uint(id, v);
      } else if (section == "train" && key == "negatives") {
        t.negatives = to_uint(id, v);
      } else if (section == "train" && key == "denominator") {
        t.denominator = parse_denominator(v);
      } else if (section == "train" && key == "pretrain_epochs") {
        t.pretrain_epochs = to_uint(id, v);
      } else if (section == "train" && key == "tune_epochs") {
        t.tune_epochs = to_uint(id, v);
      } else if (section == "train" && key == "patience") {
        t.patience = to_uint(id, v);
      } else if (section == "train" && key == "gt_epochs") {
        t.gt_epochs = to_uint(id, v);
      } else if (section == "train" && key == "gt_lr") {
        t.gt_lr = to_double(id, v);
      } else if (section == "train" && key == "gt_tau") {
        t.gt_tau = to_double(id, v);
      } else if (section == "split" && key == "cold_fraction") {
        c.split.cold_fraction = to_double(id, v);
      } else if (section == "split" && key == "min_interactions") {
        c.split.min_interactions = to_uint(id, v);
      } else if (section == "eval" && key == "protocol") {
        c.eval.protocol = parse_protocol(v);
      } else if (section == "eval" && key == "val_protocol") {
        c.eval.val_protocol = parse_protocol(v);
      } else if (section == "run" && key == "seed") {
      } else if (section == "run" && key == "threads") {
        t.threads = static_cast<unsigned>(to_uint(id, v));
      } else {
        throw ConfigError("unknown config key [" + section + "] " + key);
      }
    }
  }
  t.validate();
  if (!(c.split.cold_fraction >= 0.0 && c.split.cold_fraction <= 1.0)) {
    throw ConfigError("cold_fraction must lie in [0, 1]");
  }
  return c;
}

ConfigFile PipelineConfig::to_config() const {
  ConfigFile f;
  const auto& t = train;
  std::string list;
  for (const auto& p : domains) list += (list.empty() ? "" : ", ") + p.string();
  f.set("data", "domains", list);
  list.clear();
  for (const auto& o : overlaps) {
    list += (list.empty() ? "" : ", ") + std::to_string(o.domain_a) + ":" + std::to_string(o.domain_b) + ":" +
            o.path.string();
  }
  f.set("data", "overlap", list);
  f.set("data", "out", out.string());
  f.set("model", "dim", std::to_string(t.dim));
  f.set("model", "heads", std::to_string(t.heads));
  f.set("model", "hyper_layers", std::to_string(t.hyper_layers));
  f.set("model", "mode_layers", std::to_string(t.mode_layers));
  f.set("model", "motif", to_string(t.motif));
  list.clear();
  for (auto l : t.walk_lengths) list += (list.empty() ? "" : ", ") + std::to_string(l);
  f.set("model", "walk_lengths", list);
  f.set("model", "motif_budget", std::to_string(t.motif_budget));
  f.set("model", "lambda_f", format_double(t.lambda_f));
  f.set("model", "merge_hyperedges", t.merge_hyperedges ? "true" : "false");
  f.set("model", "prompt", to_string(t.prompt));
  f.set("model", "init_scale", format_double(t.init_scale));
  f.set("train", "tau", format_double(t.tau));
  f.set("train", "lambda1", format_double(t.lambda1));
  f.set("train", "lr", format_double(t.lr));
  f.set("train", "tune_lr", format_double(t.tune_lr));
  f.set("train", "optimizer", to_string(t.optimizer));
  f.set("train", "batch", std::to_string(t.batch));
  f.set("train", "negatives", std::to_string(t.negatives));
  f.set("train", "denominator", to_string(t.denominator));
  f.set("train", "pretrain_epochs", std::to_string(t.pretrain_epochs));
  f.set("train", "tune_epochs", std::to_string(t.tune_epochs));
  f.set("train", "patience", std::to_string(t.patience));
  f.set("train", "gt_epochs", std::to_string(t.gt_epochs));
  f.set("train", "gt_lr", format_double(t.gt_lr));
  f.set("train", "gt_tau", format_double(t.gt_tau));
  f.set("split", "cold_fraction", format_double(split.cold_fraction));
  f.set("split", "min_interactions", std::to_string(split.min_interactions));
  f.set("eval", "protocol", to_string(eval.protocol));
  f.set("eval", "val_protocol", to_string(eval.val_protocol));
  f.set("run", "seed", std::to_string(t.seed));
  f.set("run", "threads", std::to_string(t.threads));
  return f;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  auto c = from_config(ConfigFile::load(path));
  const auto base = path.parent_path();
  auto fix = [&](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  for (auto& p : c.domains) fix(p);
  for (auto& o : c.overlaps) fix(o.path);
  fix(c.out);
  return c;
}

}  // namespace mop
