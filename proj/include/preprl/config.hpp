#pragma once

#include <array>
#include <charconv>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "preprl/pipeline.hpp"

namespace preprl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  N out{};
  in >> out;
  if (in.fail() || !in.eof())
    throw ConfigError(key + ": '" + v + "' is not a valid number");
  if constexpr (std::is_unsigned_v<N>) {
    if (v.find('-') != std::string::npos) throw ConfigError(key + ": must be non-negative");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean");
}

// Shortest text that parses back to the same value.
template <typename N>
std::string format_number(N v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_keys() {
  using C = ExperimentConfig;
  using detail::parse_number;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto num = [&k](std::string name, auto member) {
      k.push_back({name,
                   [member](const C& c) { return detail::format_number(member(c)); },
                   [member, name](C& c, const std::string& v) {
                     auto& ref = member(c);
                     ref = parse_number<std::decay_t<decltype(ref)>>(name, v);
                   }});
    };
    auto flag = [&k](std::string name, auto member) {
      k.push_back({name,
                   [member](const C& c) {
                     return std::string(member(c) ? "true" : "false");
                   },
                   [member, name](C& c, const std::string& v) {
                     member(c) = detail::parse_bool(name, v);
                   }});
    };
    auto text = [&k](std::string name, auto get, auto set) { k.push_back({name, get, set}); };

    text("model.arch", [](const C& c) { return std::string(to_string(c.arch)); },
         [](C& c, const std::string& v) { c.arch = parse_arch(v); });

    text("data.source", [](const C& c) { return c.data.source; },
         [](C& c, const std::string& v) {
           if (v != "glyphs" && v != "idx") throw ConfigError("data.source: glyphs or idx");
           c.data.source = v;
         });
    text("data.name", [](const C& c) { return c.data.name; },
         [](C& c, const std::string& v) { c.data.name = v; });
    num("data.k", [](auto& c) -> auto& { return c.data.k; });
    num("data.size", [](auto& c) -> auto& { return c.data.size; });
    num("data.train_per_class", [](auto& c) -> auto& { return c.data.train_per_class; });
    num("data.val_per_class", [](auto& c) -> auto& { return c.data.val_per_class; });
    num("data.test_per_class", [](auto& c) -> auto& { return c.data.test_per_class; });
    num("data.noise", [](auto& c) -> auto& { return c.data.noise; });
    num("data.max_shift", [](auto& c) -> auto& { return c.data.max_shift; });
    num("data.seed", [](auto& c) -> auto& { return c.data.seed; });
    text("data.glyphs",
         [](const C& c) {
           std::string s;
           for (const auto& g : c.data.glyphs) s += (s.empty() ? "" : ",") + g.str();
           return s;
         },
         [](C& c, const std::string& v) {
           c.data.glyphs.clear();
           if (v.rfind("orbit:", 0) == 0) {
             c.data.glyphs = dihedral_orbit(parse_glyph(detail::trim(v.substr(6))));
             return;
           }
           for (const auto& s : detail::split_list(v)) c.data.glyphs.push_back(GlyphClass::parse(s));
         });
    flag("data.marker", [](auto& c) -> auto& { return c.data.marker; });
    text("data.dir", [](const C& c) { return c.data.dir; },
         [](C& c, const std::string& v) { c.data.dir = v; });
    num("data.val_count", [](auto& c) -> auto& { return c.data.val_count; });
    num("data.train_limit", [](auto& c) -> auto& { return c.data.train_limit; });
    num("data.test_limit", [](auto& c) -> auto& { return c.data.test_limit; });
    text("data.classes",
         [](const C& c) {
           std::string s;
           for (auto x : c.data.classes) s += (s.empty() ? "" : ",") + std::to_string(x);
           return s;
         },
         [](C& c, const std::string& v) {
           c.data.classes.clear();
           for (const auto& s : detail::split_list(v))
             c.data.classes.push_back(parse_number<std::size_t>("data.classes", s));
         });

    num("env.max_len", [](auto& c) -> auto& { return c.env.max_len; });
    num("env.step_budget", [](auto& c) -> auto& { return c.env.step_budget; });
    text("env.reward", [](const C& c) { return std::string(to_string(c.env.reward_mode)); },
         [](C& c, const std::string& v) { c.env.reward_mode = parse_reward_mode(v); });

    for (auto [prefix, pick] :
         {std::pair<std::string, TrainConfig C::*>{"nn", &C::nn}, {"cl", &C::cl}}) {
      num(prefix + ".epochs", [pick](auto& c) -> auto& { return (c.*pick).epochs; });
      num(prefix + ".batch_size", [pick](auto& c) -> auto& { return (c.*pick).batch_size; });
      num(prefix + ".lr", [pick](auto& c) -> auto& { return (c.*pick).adam.lr; });
      num(prefix + ".l2", [pick](auto& c) -> auto& { return (c.*pick).adam.l2; });
    }

    num("agent.gamma", [](auto& c) -> auto& { return c.rl.dqn.gamma; });
    num("agent.batch_size", [](auto& c) -> auto& { return c.rl.dqn.batch_size; });
    num("agent.buffer_capacity", [](auto& c) -> auto& { return c.rl.dqn.buffer_capacity; });
    num("agent.target_sync", [](auto& c) -> auto& { return c.rl.dqn.target_sync; });
    flag("agent.replay", [](auto& c) -> auto& { return c.rl.dqn.replay; });
    num("agent.warmup", [](auto& c) -> auto& { return c.rl.dqn.warmup; });
    num("agent.lr", [](auto& c) -> auto& { return c.rl.adam.lr; });
    num("agent.l2", [](auto& c) -> auto& { return c.rl.adam.l2; });
    num("agent.eps_start", [](auto& c) -> auto& { return c.rl.eps_start; });
    num("agent.eps_end", [](auto& c) -> auto& { return c.rl.eps_end; });
    num("agent.anneal_steps", [](auto& c) -> auto& { return c.rl.anneal_steps; });
    text("agent.actions", [](const C& c) { return std::string(to_string(c.rl.actions)); },
         [](C& c, const std::string& v) { c.rl.actions = parse_transform_mode(v); });
    num("rl.steps", [](auto& c) -> auto& { return c.rl.steps; });
    num("rl.eval_every", [](auto& c) -> auto& { return c.rl.eval_every; });
    num("rl.train_every", [](auto& c) -> auto& { return c.rl.train_every; });

    num("distortion.probability", [](auto& c) -> auto& { return c.distortion.probability; });
    text("distortion.mode", [](const C& c) { return std::string(to_string(c.distortion.mode)); },
         [](C& c, const std::string& v) { c.distortion.mode = parse_transform_mode(v); });
    num("distortion.min_len", [](auto& c) -> auto& { return c.distortion.lengths.lo; });
    num("distortion.max_len", [](auto& c) -> auto& { return c.distortion.lengths.hi; });
    num("distortion.seed", [](auto& c) -> auto& { return c.distortion.seed; });

    num("experiment.runs", [](auto& c) -> auto& { return c.runs; });
    num("experiment.seed", [](auto& c) -> auto& { return c.seed; });
    num("experiment.threads", [](auto& c) -> auto& { return c.threads; });
    num("experiment.trace_count", [](auto& c) -> auto& { return c.trace_count; });
    return k;
  }();
  return keys;
}

inline const ConfigKey& find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

// Applies one "key = value" (or key=value) assignment.
inline void apply_setting(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("expected key=value, got '" + assignment + "'");
  const std::string key = detail::trim(assignment.substr(0, eq));
  const std::string value = detail::trim(assignment.substr(eq + 1));
  try {
    find_key(key).set(cfg, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

// Flat "section.key = value" lines; '#' starts a comment.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text,
                              const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_setting(cfg, line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

inline ExperimentConfig parse_config_text(const std::string& text,
                                          const std::string& origin = "config") {
  ExperimentConfig cfg;
  apply_config_text(cfg, text, origin);
  return cfg;
}

inline std::string dump_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& k : config_keys()) {
    const std::string s = k.name.substr(0, k.name.find('.'));
    if (s != section) {
      if (!section.empty()) out += "\n";
      section = s;
    }
    out += k.name + " = " + k.get(cfg) + "\n";
  }
  return out;
}

}  // namespace preprl
