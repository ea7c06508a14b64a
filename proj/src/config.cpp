#include "arwb/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "arwb/errors.hpp"
#include "arwb/hash.hpp"

namespace arwb {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
    throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': value out of range");
  }
}

// Plain decimals plus "a/b" fractions such as 8/255.
double to_real(const std::string& key, const std::string& v) {
  auto one = [&](const std::string& s) {
    char* end = nullptr;
    const double x = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(x))
      throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    return x;
  };
  const auto slash = v.find('/');
  if (slash == std::string::npos) return one(v);
  const double den = one(trim(v.substr(slash + 1)));
  if (den == 0) throw ConfigError("config key '" + key + "': division by zero");
  return one(trim(v.substr(0, slash))) / den;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');)
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

std::string real_str(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct Field {
  std::string section;  // empty: top level
  std::string key;
  std::function<void(RunConfig&, const std::string& name, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field uint_field(std::string section, std::string key, T RunConfig::*member) {
  return {section, key,
          [member](RunConfig& c, const std::string& n, const std::string& v) {
            c.*member = static_cast<T>(to_uint(n, v));
          },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

template <class T>
Field real_field(std::string section, std::string key, T RunConfig::*member) {
  return {section, key,
          [member](RunConfig& c, const std::string& n, const std::string& v) {
            c.*member = static_cast<T>(to_real(n, v));
          },
          [member](const RunConfig& c) { return real_str(c.*member); }};
}

Field string_field(std::string section, std::string key, std::string RunConfig::*member) {
  return {section, key, [member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(uint_field("", "seed", &RunConfig::seed));

    v.push_back(uint_field("data", "sign_train", &RunConfig::sign_train));
    v.push_back(uint_field("data", "sign_test", &RunConfig::sign_test));
    v.push_back(uint_field("data", "road_train", &RunConfig::road_train));
    v.push_back(uint_field("data", "road_sequences", &RunConfig::road_sequences));
    v.push_back(uint_field("data", "road_frames", &RunConfig::road_frames));

    v.push_back(uint_field("model", "detector_epochs", &RunConfig::detector_epochs));
    v.push_back(uint_field("model", "regressor_epochs", &RunConfig::regressor_epochs));
    v.push_back(real_field("model", "lr", &RunConfig::lr));
    v.push_back(uint_field("model", "batch_size", &RunConfig::batch_size));
    v.push_back(uint_field("model", "advtrain_epochs", &RunConfig::advtrain_epochs));
    v.push_back(uint_field("model", "contrastive_epochs", &RunConfig::contrastive_epochs));
    v.push_back(uint_field("model", "finetune_epochs", &RunConfig::finetune_epochs));
    v.push_back(uint_field("model", "denoiser_epochs", &RunConfig::denoiser_epochs));
    v.push_back(uint_field("model", "denoiser_images", &RunConfig::denoiser_images));
    v.push_back(string_field("model", "detector", &RunConfig::detector));
    v.push_back(string_field("model", "regressor", &RunConfig::regressor));
    v.push_back(string_field("model", "denoiser", &RunConfig::denoiser));

    v.push_back({"attack", "names",
                 [](RunConfig& c, const std::string&, const std::string& s) {
                   c.attacks.clear();
                   for (const auto& n : split_list(s)) c.attacks.push_back(attack_from_string(n));
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (auto k : c.attacks) s += (s.empty() ? "" : ",") + to_string(k);
                   return s;
                 }});
    v.push_back(real_field("attack", "epsilon", &RunConfig::epsilon));
    v.push_back(real_field("attack", "alpha", &RunConfig::alpha));
    v.push_back(uint_field("attack", "iters", &RunConfig::iters));
    v.push_back(uint_field("attack", "queries", &RunConfig::queries));
    v.push_back(real_field("attack", "sigma", &RunConfig::sigma));
    v.push_back({"attack", "basis",
                 [](RunConfig& c, const std::string& n, const std::string& s) {
                   if (s == "dct") c.basis = SimbaBasis::Dct;
                   else if (s == "pixel") c.basis = SimbaBasis::Pixel;
                   else throw ConfigError("config key '" + n + "': expected dct or pixel, got '" + s + "'");
                 },
                 [](const RunConfig& c) { return std::string(c.basis == SimbaBasis::Dct ? "dct" : "pixel"); }});
    v.push_back(real_field("attack", "simba_epsilon", &RunConfig::simba_epsilon));
    v.push_back(uint_field("attack", "cap_steps", &RunConfig::cap_steps));
    v.push_back(real_field("attack", "cap_lambda", &RunConfig::cap_lambda));
    v.push_back(uint_field("attack", "rp2_iters", &RunConfig::rp2_iters));
    v.push_back(real_field("attack", "rp2_step", &RunConfig::rp2_step));
    v.push_back(real_field("attack", "rp2_lambda", &RunConfig::rp2_lambda));
    v.push_back(real_field("attack", "patch_epsilon", &RunConfig::patch_epsilon));

    v.push_back({"defense", "names",
                 [](RunConfig& c, const std::string&, const std::string& s) {
                   c.defenses.clear();
                   for (const auto& n : split_list(s)) c.defenses.push_back(defense_from_string(n));
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (auto k : c.defenses) s += (s.empty() ? "" : ",") + to_string(k);
                   return s;
                 }});
    v.push_back(uint_field("defense", "kernel", &RunConfig::kernel));
    v.push_back(uint_field("defense", "bits", &RunConfig::bits));
    v.push_back({"defense", "inner",
                 [](RunConfig& c, const std::string&, const std::string& s) { c.inner = inner_attack_from_string(s); },
                 [](const RunConfig& c) { return to_string(c.inner); }});
    v.push_back(real_field("defense", "adv_epsilon", &RunConfig::adv_epsilon));
    v.push_back(real_field("defense", "tau", &RunConfig::tau));
    v.push_back(uint_field("defense", "diffusion_steps", &RunConfig::diffusion_steps));
    v.push_back(real_field("defense", "zeta", &RunConfig::zeta));
    v.push_back(real_field("defense", "rho_lambda", &RunConfig::rho_lambda));

    v.push_back(uint_field("bench", "jobs", &RunConfig::jobs));
    v.push_back(real_field("bench", "conf", &RunConfig::conf));
    v.push_back(real_field("bench", "nms_iou", &RunConfig::nms_iou));
    v.push_back(string_field("bench", "out", &RunConfig::out));
    return v;
  }();
  return f;
}

std::string full_name(const Field& f) { return f.section.empty() ? f.key : f.section + "." + f.key; }

}  // namespace

InnerAttack inner_attack_from_string(const std::string& s) {
  for (auto k : {InnerAttack::Fgsm, InnerAttack::AutoPgd, InnerAttack::Gaussian, InnerAttack::Patch})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown inner attack '" + s + "' (valid: fgsm, autopgd, gaussian, patch)");
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& f : fields()) out += full_name(f) + " = " + f.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const { return hex64(fnv1a(canonical())); }

std::vector<AttackConfig> RunConfig::attack_configs() const {
  std::vector<AttackConfig> out;
  for (auto k : attacks) {
    AttackConfig a;
    a.kind = k;
    a.budget.norm = Norm::Linf;
    a.budget.epsilon = epsilon;
    a.budget.alpha = alpha;
    a.budget.max_iters = iters;
    a.budget.max_queries = queries;
    a.sigma = sigma;
    a.lambda = rp2_lambda;
    a.cap_lambda = cap_lambda;
    a.basis = basis;
    a.simba_epsilon = simba_epsilon;
    a.patch_epsilon = patch_epsilon;
    a.cap_steps = cap_steps;
    a.rp2_iters = rp2_iters;
    a.rp2_step = rp2_step;
    out.push_back(a);
  }
  return out;
}

std::vector<DefenseConfig> RunConfig::defense_configs() const {
  std::vector<DefenseConfig> out;
  for (auto k : defenses) {
    DefenseConfig d;
    d.kind = k;
    d.kernel = kernel;
    d.bits = bits;
    d.adv.attack = inner;
    d.adv.inner.epsilon = adv_epsilon;
    d.adv.inner.alpha = adv_epsilon / 4.0f;
    d.tau = tau;
    d.diffusion_steps = diffusion_steps;
    d.zeta = zeta;
    d.rho_lambda = rho_lambda;
    out.push_back(d);
  }
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::set<std::string> sections;
  for (const auto& f : fields()) sections.insert(f.section);
  std::set<std::string> seen;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
    const auto hash = raw.find_first_of("#;");
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty() || !sections.count(section)) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const std::string name = section.empty() ? key : section + "." + key;
    const Field* field = nullptr;
    for (const auto& f : fields())
      if (f.section == section && f.key == key) field = &f;
    if (!field) throw ConfigError("unknown config key '" + name + "'");
    if (!seen.insert(name).second) throw ConfigError("duplicate config key '" + name + "'");
    field->set(c, name, value);
  }
  if (c.attacks.empty()) throw ConfigError("config key 'attack.names': at least one attack is required");
  if (c.defenses.empty()) throw ConfigError("config key 'defense.names': at least one defense is required");
  try {
    for (const auto& a : c.attack_configs()) a.budget.validate();
    for (const auto& d : c.defense_configs()) d.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

void apply_env_overrides(RunConfig& cfg) {
  if (const char* s = std::getenv("ARW_SEED"); s && *s) cfg.seed = to_uint("ARW_SEED", s);
}

}  // namespace arwb
