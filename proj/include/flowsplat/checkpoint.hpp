#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "flowsplat/autodiff.hpp"
#include "flowsplat/error.hpp"
#include "json.hpp"

namespace flowsplat {

using Json = nlohmann::json;

inline Json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline void save_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  out << j.dump(1) << "\n";
  out.flush();
  if (!out) throw ParseError("write failed: " + path);
}

/// Field accessor that reports the offending field by name.
template <typename T>
T json_field(const Json& j, const std::string& name,
             const std::string& where) {
  if (!j.is_object() || !j.contains(name))
    throw ParseError(where + ": missing field \"" + name + "\"");
  try {
    return j.at(name).get<T>();
  } catch (const Json::exception&) {
    throw ParseError(where + ": field \"" + name + "\" has the wrong type");
  }
}

template <typename T>
T json_field_or(const Json& j, const std::string& name,
                const std::string& where, T fallback) {
  if (!j.is_object() || !j.contains(name)) return fallback;
  return json_field<T>(j, name, where);
}

inline constexpr const char* kCheckpointFormat = "flowsplat-checkpoint";

/// Serializes every named parameter array as {shape, data} plus the
/// optimizer moments. nlohmann emits shortest-round-trip doubles, so a
/// load reproduces every value exactly.
inline Json checkpoint_to_json(const ParamStore& store, const Adam* opt,
                               const Json& meta) {
  Json params = Json::object();
  for (std::size_t i = 0; i < store.entry_count(); ++i) {
    const ParamStore::Entry& e = store.entry(i);
    auto vals = store.values(e.name);
    params[e.name] = {
        {"shape", e.shape},
        {"data", std::vector<double>(vals.begin(), vals.end())}};
  }
  Json j{{"format", kCheckpointFormat}, {"version", 1}, {"meta", meta},
         {"params", std::move(params)}};
  if (opt) {
    j["optimizer"] = {{"t", opt->t()}, {"m", opt->m()}, {"v", opt->v()}};
  }
  return j;
}

inline void save_checkpoint(const std::string& path, const ParamStore& store,
                            const Adam* opt, const Json& meta) {
  save_json_file(path, checkpoint_to_json(store, opt, meta));
}

/// Loads parameter values into an already-shaped store (the model
/// architecture decides the shapes; the file must agree). Returns the
/// meta object. Restores optimizer state when both the file has it and
/// opt is non-null.
inline Json checkpoint_from_json(const Json& j, ParamStore& store,
                                 Adam* opt, const std::string& where) {
  auto format = json_field<std::string>(j, "format", where);
  if (format != kCheckpointFormat)
    throw ParseError(where + ": field \"format\" is not \"" +
                     kCheckpointFormat + "\"");
  int version = json_field<int>(j, "version", where);
  if (version != 1)
    throw ParseError(where + ": unsupported checkpoint version " +
                     std::to_string(version));
  if (!j.contains("params") || !j.at("params").is_object())
    throw ParseError(where + ": missing field \"params\"");
  const Json& params = j.at("params");

  for (std::size_t i = 0; i < store.entry_count(); ++i) {
    const ParamStore::Entry& e = store.entry(i);
    if (!params.contains(e.name))
      throw ParseError(where + ": missing parameter \"" + e.name + "\"");
    const Json& pj = params.at(e.name);
    auto shape = json_field<std::vector<std::size_t>>(
        pj, "shape", where + ": parameter \"" + e.name + "\"");
    if (shape != e.shape)
      throw ParseError(where + ": parameter \"" + e.name +
                       "\" has mismatched shape");
    auto data = json_field<std::vector<double>>(
        pj, "data", where + ": parameter \"" + e.name + "\"");
    if (data.size() != e.size)
      throw ParseError(where + ": parameter \"" + e.name +
                       "\" has wrong data length");
    auto dst = store.values(e.name);
    std::copy(data.begin(), data.end(), dst.begin());
  }
  for (auto it = params.begin(); it != params.end(); ++it) {
    if (!store.has(it.key()))
      throw ParseError(where + ": unknown parameter \"" + it.key() + "\"");
  }

  if (opt && j.contains("optimizer")) {
    const Json& oj = j.at("optimizer");
    auto m = json_field<std::vector<double>>(oj, "m", where + ": optimizer");
    auto v = json_field<std::vector<double>>(oj, "v", where + ": optimizer");
    auto t = json_field<long long>(oj, "t", where + ": optimizer");
    if (m.size() != store.size() || v.size() != store.size())
      throw ParseError(where + ": optimizer state length mismatch");
    opt->restore(std::move(m), std::move(v), t);
  }
  return j.contains("meta") ? j.at("meta") : Json::object();
}

inline Json load_checkpoint(const std::string& path, ParamStore& store,
                            Adam* opt) {
  return checkpoint_from_json(load_json_file(path), store, opt, path);
}

}  // namespace flowsplat
