#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dfl/model.hpp"

namespace dfl {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'D', 'F', 'L', '1'};
constexpr int kFormatVersion = 1;

json config_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"lr_shared", c.lr_shared},
          {"head_lr_multiplier", c.head_lr_multiplier},
          {"lr_decay", c.lr_decay},
          {"lr_decay_every", c.lr_decay_every},
          {"weight_decay", c.weight_decay},
          {"momentum", c.momentum},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"patch_size", c.patch_size},
          {"test_patches", c.test_patches},
          {"loss", std::string(loss_name(c.loss))},
          {"augment", c.augment}};
}

template <typename T>
void overlay(const json& j, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw SchemaError(std::string("config key '") + key + "' has the wrong type");
  }
}

TrainConfig config_overlay(const json& j, TrainConfig c) {
  if (!j.is_object()) throw SchemaError("train config must be a JSON object");
  overlay(j, "batch_size", c.batch_size);
  overlay(j, "lr_shared", c.lr_shared);
  overlay(j, "head_lr_multiplier", c.head_lr_multiplier);
  overlay(j, "lr_decay", c.lr_decay);
  overlay(j, "lr_decay_every", c.lr_decay_every);
  overlay(j, "weight_decay", c.weight_decay);
  overlay(j, "momentum", c.momentum);
  overlay(j, "epochs", c.epochs);
  overlay(j, "seed", c.seed);
  overlay(j, "patch_size", c.patch_size);
  overlay(j, "test_patches", c.test_patches);
  overlay(j, "augment", c.augment);
  if (j.contains("loss")) {
    if (!j["loss"].is_string()) throw SchemaError("config key 'loss' must be a string");
    c.loss = parse_loss(j["loss"].get<std::string>());
  }
  return c;
}

void put_f64(std::vector<unsigned char>& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

struct Block {
  std::string name;
  std::size_t count;
};

std::vector<Block> blocks_for(const DefectModel& m) {
  std::vector<Block> b{{"feature_mean", kFeatureDim},
                       {"feature_scale", kFeatureDim},
                       {"trunk.w1", static_cast<std::size_t>(kHidden1) * kFeatureDim},
                       {"trunk.b1", kHidden1},
                       {"trunk.w2", static_cast<std::size_t>(kHidden2) * kHidden1},
                       {"trunk.b2", kHidden2}};
  for (DefectKind d : m.defects) {
    const std::size_t k = class_count(d);
    b.push_back({"head." + std::string(defect_name(d)) + ".w", k * kHidden2});
    b.push_back({"head." + std::string(defect_name(d)) + ".b", k});
  }
  return b;
}

}  // namespace

std::string config_to_json(const TrainConfig& config) { return config_json(config).dump(); }

TrainConfig config_from_json(std::string_view text, TrainConfig base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_overlay(j, base);
}

std::vector<unsigned char> serialize_model(const DefectModel& m) {
  json header;
  header["format_version"] = kFormatVersion;
  header["column"] = std::string(column_name(m.column));
  header["feature_dim"] = kFeatureDim;
  header["hidden"] = {kHidden1, kHidden2};
  json defects = json::array(), classes = json::array();
  for (DefectKind d : m.defects) {
    defects.push_back(std::string(defect_name(d)));
    classes.push_back(class_count(d));
  }
  header["defects"] = defects;
  header["class_counts"] = classes;
  header["config"] = config_json(m.config);
  header["feature_version"] = m.feature_version;
  header["provenance"] = m.provenance;
  json blocks = json::array();
  for (const auto& b : blocks_for(m)) blocks.push_back({{"name", b.name}, {"count", b.count}});
  header["blocks"] = blocks;

  const std::string text = header.dump();
  std::vector<unsigned char> out(kMagic, kMagic + 4);
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(len >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  for (double v : m.feature_mean) put_f64(out, v);
  for (double v : m.feature_scale) put_f64(out, v);
  for (double v : m.params) put_f64(out, v);
  return out;
}

DefectModel deserialize_model(std::span<const unsigned char> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw DecodeError("not a DFL1 model file");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[4 + i]) << (8 * i);
  if (bytes.size() < 8 + static_cast<std::size_t>(len)) throw DecodeError("model header truncated");
  json h;
  try {
    h = json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
  } catch (const json::parse_error& e) {
    throw DecodeError(std::string("model header is not JSON: ") + e.what());
  }

  DefectModel m;
  try {
    if (h.at("format_version").get<int>() != kFormatVersion) throw SchemaError("unsupported model format version");
    if (h.at("feature_dim").get<int>() != kFeatureDim ||
        h.at("hidden") != json::array({kHidden1, kHidden2})) {
      throw SchemaError("model dimensions do not match this build");
    }
    m.column = parse_column(h.at("column").get<std::string>());
    for (const auto& d : h.at("defects")) m.defects.push_back(parse_defect(d.get<std::string>()));
    if (m.defects != column_defects(m.column)) throw SchemaError("model heads do not match its column");
    m.config = config_overlay(h.at("config"), TrainConfig{});
    m.feature_version = h.at("feature_version").get<std::string>();
    m.provenance = h.value("provenance", "");
    const auto expected = blocks_for(m);
    const auto& blocks = h.at("blocks");
    if (blocks.size() != expected.size()) throw SchemaError("model block list does not match its heads");
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (blocks[i].at("name").get<std::string>() != expected[i].name ||
          blocks[i].at("count").get<std::size_t>() != expected[i].count) {
        throw SchemaError("unexpected model block " + blocks[i].dump());
      }
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("model header: ") + e.what());
  } catch (const ArgumentError& e) {
    throw SchemaError(std::string("model header: ") + e.what());
  }

  std::size_t values = 0;
  for (const auto& b : blocks_for(m)) values += b.count;
  const unsigned char* p = bytes.data() + 8 + len;
  if (static_cast<std::size_t>(bytes.data() + bytes.size() - p) != values * 8) {
    throw DecodeError("model parameter data has the wrong length");
  }
  for (double& v : m.feature_mean) v = get_f64(p), p += 8;
  for (double& v : m.feature_scale) v = get_f64(p), p += 8;
  m.params.resize(values - 2 * kFeatureDim);
  for (double& v : m.params) v = get_f64(p), p += 8;
  return m;
}

void save_model(const DefectModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing model " + path.string());
}

DefectModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_model(bytes);
  } catch (const DataError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

}  // namespace dfl
