#include "mf/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mf {

namespace {

constexpr char kMagic[4] = {'M', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

nlohmann::json model_to_json_obj(const ModelConfig& cfg) {
  nlohmann::json j;
  j["feature_channels"] = cfg.feature_channels;
  j["f_hidden"] = cfg.f_hidden;
  j["m_hidden"] = cfg.m_hidden;
  j["s_hidden1"] = cfg.s_hidden1;
  j["s_hidden2"] = cfg.s_hidden2;
  nlohmann::json bb = nlohmann::json::array();
  for (const ConvSpec& l : cfg.backbone) bb.push_back({l.channels, l.stride});
  j["backbone"] = std::move(bb);
  j["K"] = cfg.K;
  j["scale_divisors"] = cfg.scale_divisors;
  j["grid_h"] = cfg.grid_h;
  j["grid_w"] = cfg.grid_w;
  j["max_disp"] = cfg.max_disp;
  j["mask_enabled"] = cfg.mask_enabled;
  j["branches_enabled"] = cfg.branches_enabled;
  return j;
}

ModelConfig model_from_json_obj(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.feature_channels = j.at("feature_channels").get<int>();
  cfg.f_hidden = j.at("f_hidden").get<int>();
  cfg.m_hidden = j.at("m_hidden").get<int>();
  cfg.s_hidden1 = j.at("s_hidden1").get<int>();
  cfg.s_hidden2 = j.at("s_hidden2").get<int>();
  cfg.backbone.clear();
  for (const auto& l : j.at("backbone")) {
    if (!l.is_array() || l.size() != 2) {
      throw FormatError("backbone entries must be [channels, stride]");
    }
    cfg.backbone.push_back({l[0].get<int>(), l[1].get<int>()});
  }
  cfg.K = j.at("K").get<int>();
  cfg.scale_divisors = j.at("scale_divisors").get<std::vector<int>>();
  cfg.grid_h = j.at("grid_h").get<int>();
  cfg.grid_w = j.at("grid_w").get<int>();
  cfg.max_disp = j.at("max_disp").get<double>();
  cfg.mask_enabled = j.at("mask_enabled").get<bool>();
  cfg.branches_enabled = j.at("branches_enabled").get<std::vector<int>>();
  return cfg;
}

nlohmann::json optim_to_json_obj(const OptimConfig& cfg) {
  nlohmann::json j;
  j["lr"] = cfg.lr;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["eps"] = cfg.eps;
  j["batch"] = cfg.batch;
  j["lr_decay_every"] = cfg.lr_decay_every;
  j["lr_decay_factor"] = cfg.lr_decay_factor;
  j["total_iters"] = cfg.total_iters;
  return j;
}

OptimConfig optim_from_json_obj(const nlohmann::json& j) {
  OptimConfig cfg;
  cfg.lr = j.at("lr").get<double>();
  cfg.beta1 = j.at("beta1").get<double>();
  cfg.beta2 = j.at("beta2").get<double>();
  cfg.eps = j.at("eps").get<double>();
  cfg.batch = j.at("batch").get<int>();
  cfg.lr_decay_every = j.at("lr_decay_every").get<int>();
  cfg.lr_decay_factor = j.at("lr_decay_factor").get<double>();
  cfg.total_iters = j.at("total_iters").get<int>();
  return cfg;
}

template <typename T>
void write_le(std::ostream& out, T value) {
  // x86-64 is little-endian; byte order asserted by the round-trip tests
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, std::size_t& offset, const char* what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw FormatError(std::string("truncated checkpoint while reading ") + what,
                      offset);
  }
  offset += sizeof(T);
  return value;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
  return model_to_json_obj(cfg).dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return model_from_json_obj(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad model config JSON: " + std::string(e.what()));
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json cfg;
  cfg["model"] = model_to_json_obj(ckpt.model);
  cfg["optim"] = optim_to_json_obj(ckpt.optim);
  cfg["rng"] = {{"seed", ckpt.rng_seed}, {"draws", ckpt.rng_draws}};
  cfg["adam"] = {{"present", ckpt.has_adam}, {"step_count", ckpt.adam_step_count}};
  const std::string blob = cfg.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(kMagic, 4);
  write_le<std::uint32_t>(out, ckpt.version);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(blob.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const Checkpoint::Entry& e : ckpt.tensors) {
    if (e.name.size() > 0xffff) throw FormatError("tensor name too long");
    write_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    if (e.shape.size() > 0xff) throw FormatError("tensor rank too large");
    write_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    std::int64_t count = 1;
    for (int d : e.shape) {
      write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
      count *= d;
    }
    if (static_cast<std::int64_t>(e.data.size()) != count) {
      throw FormatError("tensor payload does not match its dims: " + e.name);
    }
    out.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::size_t offset = 0;

  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic (expected MFCK)", 0);
  }
  offset = 4;

  Checkpoint ckpt;
  ckpt.version = read_le<std::uint32_t>(in, offset, "version");
  if (ckpt.version != kVersion) {
    throw FormatError("unsupported checkpoint version " +
                          std::to_string(ckpt.version),
                      4);
  }
  const auto blob_len = read_le<std::uint32_t>(in, offset, "config length");
  std::string blob(blob_len, '\0');
  in.read(blob.data(), blob_len);
  if (in.gcount() != static_cast<std::streamsize>(blob_len)) {
    throw FormatError("truncated checkpoint config blob", offset);
  }
  offset += blob_len;

  try {
    const nlohmann::json cfg = nlohmann::json::parse(blob);
    ckpt.model = model_from_json_obj(cfg.at("model"));
    ckpt.optim = optim_from_json_obj(cfg.at("optim"));
    ckpt.rng_seed = cfg.at("rng").at("seed").get<std::uint64_t>();
    ckpt.rng_draws = cfg.at("rng").at("draws").get<std::uint64_t>();
    ckpt.has_adam = cfg.at("adam").at("present").get<bool>();
    ckpt.adam_step_count = cfg.at("adam").at("step_count").get<long long>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint config blob: " + std::string(e.what()), 12);
  }
  try {
    ckpt.model.validate();
    ckpt.optim.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what(), 12);
  }

  const auto tensor_count = read_le<std::uint32_t>(in, offset, "tensor count");
  for (std::uint32_t t = 0; t < tensor_count; ++t) {
    Checkpoint::Entry e;
    const auto name_len = read_le<std::uint16_t>(in, offset, "tensor name length");
    e.name.resize(name_len);
    in.read(e.name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len)) {
      throw FormatError("truncated tensor name", offset);
    }
    offset += name_len;
    const auto rank = read_le<std::uint8_t>(in, offset, "tensor rank");
    std::int64_t count = 1;
    for (int d = 0; d < rank; ++d) {
      const auto dim = read_le<std::uint32_t>(in, offset, "tensor dim");
      if (dim == 0 || dim > (1u << 24)) {
        throw FormatError("implausible tensor dim " + std::to_string(dim), offset);
      }
      e.shape.push_back(static_cast<int>(dim));
      count *= dim;
    }
    e.data.resize(static_cast<std::size_t>(count));
    in.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(e.data.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(e.data.size() * sizeof(float))) {
      throw FormatError("truncated tensor payload for " + e.name, offset);
    }
    offset += e.data.size() * sizeof(float);
    ckpt.tensors.push_back(std::move(e));
  }

  // strict name schema: exactly the parameters of the stored ModelConfig,
  // plus adam.m.* / adam.v.* slots when the Adam state is present
  std::set<std::string> expected;
  std::map<std::string, Shape> expected_shapes;
  for (const ParamSpec& s : parameter_schema(ckpt.model)) {
    expected.insert(s.name);
    expected_shapes[s.name] = s.shape;
    if (ckpt.has_adam) {
      expected.insert("adam.m." + s.name);
      expected.insert("adam.v." + s.name);
      expected_shapes["adam.m." + s.name] = s.shape;
      expected_shapes["adam.v." + s.name] = s.shape;
    }
  }
  std::set<std::string> seen;
  std::string unknown;
  for (const Checkpoint::Entry& e : ckpt.tensors) {
    if (!expected.count(e.name)) {
      unknown += unknown.empty() ? e.name : ", " + e.name;
      continue;
    }
    if (!seen.insert(e.name).second) {
      throw FormatError("duplicate tensor: " + e.name);
    }
    if (expected_shapes[e.name] != e.shape) {
      throw FormatError("tensor " + e.name + " has shape " + shape_str(e.shape) +
                        ", config implies " + shape_str(expected_shapes[e.name]));
    }
  }
  if (!unknown.empty()) {
    throw FormatError("checkpoint contains unknown tensors: " + unknown);
  }
  if (seen.size() != expected.size()) {
    std::string missing;
    for (const std::string& name : expected) {
      if (!seen.count(name)) missing += missing.empty() ? name : ", " + name;
    }
    throw FormatError("checkpoint is missing tensors: " + missing);
  }
  return ckpt;
}

Checkpoint make_checkpoint(const ModelConfig& model, const OptimConfig& optim,
                           const Parameters<float>& params,
                           const AdamState<float>* adam, std::uint64_t rng_seed,
                           std::uint64_t rng_draws) {
  Checkpoint ckpt;
  ckpt.model = model;
  ckpt.optim = optim;
  ckpt.rng_seed = rng_seed;
  ckpt.rng_draws = rng_draws;
  ckpt.has_adam = adam != nullptr;
  ckpt.adam_step_count = adam ? adam->step_count : 0;
  for (const ParamSpec& s : parameter_schema(model)) {
    const Tensor<float>& t = params.at(s.name);
    auto v = t.values();
    ckpt.tensors.push_back({s.name, t.shape(), {v.begin(), v.end()}});
    if (adam) {
      const auto& slot = adam->slots.at(s.name);
      std::vector<float> m(slot.m.begin(), slot.m.end());
      std::vector<float> vv(slot.v.begin(), slot.v.end());
      ckpt.tensors.push_back({"adam.m." + s.name, t.shape(), std::move(m)});
      ckpt.tensors.push_back({"adam.v." + s.name, t.shape(), std::move(vv)});
    }
  }
  return ckpt;
}

Parameters<float> parameters_from_checkpoint(const Checkpoint& ckpt) {
  Parameters<float> p;
  for (const Checkpoint::Entry& e : ckpt.tensors) {
    if (e.name.rfind("adam.", 0) == 0) continue;
    p.named.emplace(e.name, Tensor<float>::from_vector(e.shape, e.data, true));
  }
  return p;
}

AdamState<float> adam_from_checkpoint(const Checkpoint& ckpt) {
  AdamState<float> s;
  if (!ckpt.has_adam) return s;
  s.step_count = ckpt.adam_step_count;
  for (const Checkpoint::Entry& e : ckpt.tensors) {
    if (e.name.rfind("adam.m.", 0) == 0) {
      auto& slot = s.slots[e.name.substr(7)];
      slot.m.assign(e.data.begin(), e.data.end());
    } else if (e.name.rfind("adam.v.", 0) == 0) {
      auto& slot = s.slots[e.name.substr(7)];
      slot.v.assign(e.data.begin(), e.data.end());
    }
  }
  return s;
}

}  // namespace mf
