#include "capsdense/model_json.hpp"

#include <fstream>
#include <set>

#include "json.hpp"

namespace capsdense {

namespace {

using nlohmann::json;

json dense_to_json(const DenseBlockSpec& d) {
  return json{{"layers", d.layers},
              {"growth", d.growth},
              {"kernel", d.kernel},
              {"concat_input", d.concat_input}};
}

json primary_to_json(const PrimaryCapsSpec& p) {
  return json{{"channels", p.channels},
              {"dim", p.dim},
              {"kernel", p.kernel},
              {"stride", p.stride},
              {"padding", p.padding == Pad::valid ? "valid" : "same"}};
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

int get_int(const json& j, const char* key, int fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer())
    throw ConfigError(where + "." + key + " must be an integer");
  return v.get<int>();
}

bool get_bool(const json& j, const char* key, bool fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_boolean()) throw ConfigError(where + "." + key + " must be a boolean");
  return v.get<bool>();
}

DenseBlockSpec dense_from_json(const json& j, const std::string& where) {
  check_keys(j, {"layers", "growth", "kernel", "concat_input"}, where);
  DenseBlockSpec d;
  d.layers = get_int(j, "layers", d.layers, where);
  d.growth = get_int(j, "growth", d.growth, where);
  d.kernel = get_int(j, "kernel", d.kernel, where);
  d.concat_input = get_bool(j, "concat_input", d.concat_input, where);
  return d;
}

PrimaryCapsSpec primary_from_json(const json& j, const std::string& where) {
  check_keys(j, {"channels", "dim", "kernel", "stride", "padding"}, where);
  PrimaryCapsSpec p;
  p.channels = get_int(j, "channels", p.channels, where);
  p.dim = get_int(j, "dim", p.dim, where);
  p.kernel = get_int(j, "kernel", p.kernel, where);
  p.stride = get_int(j, "stride", p.stride, where);
  if (j.contains("padding")) {
    const std::string pad = j.at("padding").get<std::string>();
    if (pad == "valid")
      p.padding = Pad::valid;
    else if (pad == "same")
      p.padding = Pad::same;
    else
      throw ConfigError(where + ".padding must be \"valid\" or \"same\", got \"" + pad + "\"");
  }
  return p;
}

}  // namespace

std::string model_spec_to_json(const ModelSpec& spec) {
  json j;
  j["kind"] = to_string(spec.kind);
  j["in_channels"] = spec.in_channels;
  j["in_h"] = spec.in_h;
  j["in_w"] = spec.in_w;
  j["num_classes"] = spec.num_classes;
  j["routing_iters"] = spec.routing_iters;
  j["with_decoder"] = spec.with_decoder;
  j["decoder"] = json{{"w1", spec.decoder.w1}, {"w2", spec.decoder.w2}};
  if (spec.is_stacked()) {
    json levels = json::array();
    for (const auto& l : spec.levels)
      levels.push_back(json{{"dense", dense_to_json(l.dense)},
                            {"primary", primary_to_json(l.primary)},
                            {"head_dim", l.head_dim}});
    j["levels"] = levels;
    j["merged_dim"] = spec.merged_dim;
    j["head_isolation"] = spec.head_isolation;
  } else {
    if (spec.kind == ModelKind::baseline_capsnet || spec.kind == ModelKind::capsnet_variant)
      j["stem_maps"] = spec.stem_maps;
    else
      j["dense"] = dense_to_json(spec.dense);
    j["primary"] = primary_to_json(spec.primary);
    j["class_dim"] = spec.class_dim;
  }
  return j.dump(2) + "\n";
}

ModelSpec model_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("model spec is not valid JSON: ") + e.what());
  }
  check_keys(j,
             {"kind", "in_channels", "in_h", "in_w", "num_classes", "routing_iters", "stem_maps",
              "dense", "primary", "class_dim", "levels", "merged_dim", "head_isolation",
              "with_decoder", "decoder"},
             "model spec");
  ModelSpec s;
  if (j.contains("kind")) {
    if (!j.at("kind").is_string()) throw ConfigError("model spec.kind must be a string");
    s.kind = model_kind_from_string(j.at("kind").get<std::string>());
  }
  s.in_channels = get_int(j, "in_channels", s.in_channels, "model spec");
  s.in_h = get_int(j, "in_h", s.in_h, "model spec");
  s.in_w = get_int(j, "in_w", s.in_w, "model spec");
  s.num_classes = get_int(j, "num_classes", s.num_classes, "model spec");
  s.routing_iters = get_int(j, "routing_iters", s.routing_iters, "model spec");
  s.stem_maps = get_int(j, "stem_maps", s.stem_maps, "model spec");
  s.class_dim = get_int(j, "class_dim", s.class_dim, "model spec");
  s.merged_dim = get_int(j, "merged_dim", s.merged_dim, "model spec");
  s.head_isolation = get_bool(j, "head_isolation", s.head_isolation, "model spec");
  s.with_decoder = get_bool(j, "with_decoder", s.with_decoder, "model spec");
  if (j.contains("dense")) s.dense = dense_from_json(j.at("dense"), "model spec.dense");
  if (j.contains("primary")) s.primary = primary_from_json(j.at("primary"), "model spec.primary");
  if (j.contains("decoder")) {
    check_keys(j.at("decoder"), {"w1", "w2"}, "model spec.decoder");
    s.decoder.w1 = get_int(j.at("decoder"), "w1", s.decoder.w1, "model spec.decoder");
    s.decoder.w2 = get_int(j.at("decoder"), "w2", s.decoder.w2, "model spec.decoder");
  }
  if (j.contains("levels")) {
    if (!j.at("levels").is_array()) throw ConfigError("model spec.levels must be an array");
    s.levels.clear();
    size_t idx = 0;
    for (const auto& lj : j.at("levels")) {
      const std::string where = "model spec.levels[" + std::to_string(idx++) + "]";
      check_keys(lj, {"dense", "primary", "head_dim"}, where);
      LevelSpec l;
      if (lj.contains("dense")) l.dense = dense_from_json(lj.at("dense"), where + ".dense");
      if (lj.contains("primary"))
        l.primary = primary_from_json(lj.at("primary"), where + ".primary");
      l.head_dim = get_int(lj, "head_dim", l.head_dim, where);
      s.levels.push_back(l);
    }
  }
  if (s.is_stacked() && s.levels.empty())
    throw ConfigError("model spec: kind '" + std::string(to_string(s.kind)) +
                      "' requires a non-empty levels array");
  if (!s.is_stacked() && j.contains("levels"))
    throw ConfigError("model spec: levels only apply to kind 'dcnet-plus-plus'");
  return s;
}

void save_model_spec(const std::string& path, const ModelSpec& spec) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("save_model_spec: cannot write '" + path + "'");
  f << model_spec_to_json(spec);
}

ModelSpec load_model_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open model spec '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return model_spec_from_json(text);
}

}  // namespace capsdense
