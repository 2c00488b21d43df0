#include "aunet/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "aunet/error.hpp"

namespace aunet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const char* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end)
    throw ConfigError("bad value '" + s + "' for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("bad boolean '" + s + "' for " + key);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

std::string fmt_int_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
};

#define AUNET_INT(name, member)                                                            \
  Field {                                                                                  \
    name, [](const RunConfig& c) { return std::to_string(c.member); },                   \
        [](RunConfig& c, const std::string& k, const std::string& v) {                     \
          c.member = parse_number<decltype(c.member)>(k, v);                               \
        }                                                                                  \
  }
#define AUNET_DOUBLE(name, member)                                                         \
  Field {                                                                                  \
    name, [](const RunConfig& c) { return fmt_double(c.member); },                       \
        [](RunConfig& c, const std::string& k, const std::string& v) {                     \
          c.member = parse_number<double>(k, v);                                           \
        }                                                                                  \
  }
#define AUNET_BOOL(name, member)                                                           \
  Field {                                                                                  \
    name, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); },   \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_bool(k, v); } \
  }
#define AUNET_STRING(name, member)                                                         \
  Field {                                                                                  \
    name, [](const RunConfig& c) { return c.member; },                                   \
        [](RunConfig& c, const std::string&, const std::string& v) { c.member = v; }       \
  }
#define AUNET_LIST(name, member)                                                           \
  Field {                                                                                  \
    name, [](const RunConfig& c) { return fmt_int_list(c.member); },                     \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_int_list(k, v); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      AUNET_STRING("data_dir", data_dir),
      AUNET_STRING("output_dir", output_dir),
      AUNET_INT("seed", seed),
      AUNET_INT("image_size", image_size),
      AUNET_INT("backbone_depth", model.backbone.depth),
      AUNET_LIST("backbone_widths", model.backbone.widths),
      AUNET_INT("backbone_stem_width", model.backbone.stem_width),
      AUNET_INT("norm_groups", model.backbone.groups),
      AUNET_INT("router_hidden", model.router_hidden),
      AUNET_INT("csr_hidden", model.csr_hidden),
      AUNET_INT("encoder_width", model.encoder_width),
      AUNET_INT("encoder_seed", model.encoder_seed),
      AUNET_INT("attention_dim", model.mai.attention_dim),
      AUNET_LIST("token_grids", model.mai.token_grids),
      AUNET_DOUBLE("fusion_weight_init", model.mai.weight_init),
      AUNET_DOUBLE("fusion_weight_lr_scale", model.mai.weight_lr_scale),
      AUNET_INT("head_width", model.head.tower_width),
      AUNET_DOUBLE("head_prior", model.head.prior_prob),
      AUNET_DOUBLE("lambda_init", model.lambda_init),
      AUNET_DOUBLE("contrastive_weight_init", model.contrastive_weight_init),
      AUNET_DOUBLE("loss_weight_lr_scale", model.loss_weight_lr_scale),
      Field{"optimizer",
            [](const RunConfig& c) {
              return std::string(c.optimizer.kind == OptimizerKind::kSgd ? "sgd" : "adam");
            },
            [](RunConfig& c, const std::string& k, const std::string& v) {
              if (v == "sgd")
                c.optimizer.kind = OptimizerKind::kSgd;
              else if (v == "adam")
                c.optimizer.kind = OptimizerKind::kAdam;
              else
                throw ConfigError("bad value '" + v + "' for " + k + " (sgd or adam)");
            }},
      AUNET_DOUBLE("lr", optimizer.lr),
      AUNET_DOUBLE("momentum", optimizer.momentum),
      AUNET_DOUBLE("adam_beta1", optimizer.beta1),
      AUNET_DOUBLE("adam_beta2", optimizer.beta2),
      AUNET_DOUBLE("adam_eps", optimizer.eps),
      AUNET_DOUBLE("grad_clip", optimizer.grad_clip),
      AUNET_INT("steps", steps),
      AUNET_INT("batch_size", batch_size),
      AUNET_INT("checkpoint_interval", checkpoint_interval),
      AUNET_BOOL("modality_dropout", modality_dropout),
      AUNET_DOUBLE("conf_thresh", conf_thresh),
      AUNET_DOUBLE("nms_iou", nms_iou),
  };
  return f;
}

const Field& field(const std::string& key) {
  for (const Field& f : fields())
    if (key == f.key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adam eps must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be nonnegative");
}

void RunConfig::validate() const {
  if (image_size < 32 || image_size % 32 != 0)
    throw ConfigError("image_size must be a positive multiple of 32");
  model.validate();
  optimizer.validate();
  for (std::size_t l = 0; l < model.mai.token_grids.size(); ++l)
    if (model.mai.token_grids[l] > image_size / kLevelStrides[l])
      throw ConfigError("token grid " + std::to_string(model.mai.token_grids[l]) + " exceeds level " +
                        std::to_string(l) + " size " + std::to_string(image_size / kLevelStrides[l]));
  if (steps < 0) throw ConfigError("steps must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be nonnegative");
  if (!(conf_thresh >= 0.0 && conf_thresh < 1.0)) throw ConfigError("conf_thresh must lie in [0, 1)");
  if (!(nms_iou > 0.0 && nms_iou <= 1.0)) throw ConfigError("nms_iou must lie in (0, 1]");
}

std::vector<int> default_token_grids(int image_size) {
  const int preferred[kLevelCount] = {8, 4, 4};
  std::vector<int> g;
  for (int l = 0; l < kLevelCount; ++l) g.push_back(std::max(1, std::min(preferred[l], image_size / kLevelStrides[l])));
  return g;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  field(key).set(config, key, value);
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": repeated key '" + key + "'");
    set_config_value(c, key, value);
  }
  if (!seen.count("token_grids")) c.model.mai.token_grids = default_token_grids(c.image_size);
  c.validate();
  return c;
}

std::string dump_config(const RunConfig& config) {
  std::string out;
  for (const Field& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

RunConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace aunet
