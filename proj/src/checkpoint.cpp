#include "lsttm/checkpoint.hpp"

#include "json.hpp"
#include "lsttm/datasim.hpp"

#include <bit>
#include <cstring>

namespace lsttm {

using ad::Array;
using json = nlohmann::json;

namespace {

constexpr std::string_view kMagic = "LSTTMCK1";
constexpr int kFormat = 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

class Writer {
 public:
  json tensor(const Array& a) {
    json t = {{"rows", a.rows()}, {"cols", a.cols()}, {"offset", values_.size()}};
    values_.insert(values_.end(), a.data(), a.data() + a.size());
    return t;
  }
  json edges(const std::vector<Edge>& edges) {
    json t = {{"count", edges.size()}, {"offset", values_.size()}};
    for (const Edge& e : edges) {
      for (std::int64_t v : {e.user, e.item, e.ts}) {
        if (v > (std::int64_t{1} << 53) || v < -(std::int64_t{1} << 53)) {
          throw CheckpointError("checkpoint: edge field " + std::to_string(v) + " is not representable");
        }
        values_.push_back(static_cast<double>(v));
      }
    }
    return t;
  }
  const std::vector<double>& values() const { return values_; }

 private:
  std::vector<double> values_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t data_start) : bytes_(bytes), start_(data_start) {
    if ((bytes.size() - data_start) % 8 != 0) throw CheckpointError("checkpoint: data section is not float64-aligned");
    count_ = (bytes.size() - data_start) / 8;
  }
  double at(std::size_t i) const { return std::bit_cast<double>(get_u64(bytes_, start_ + 8 * i)); }
  Array tensor(const json& t) const {
    const auto rows = t.at("rows").get<ad::Index>(), cols = t.at("cols").get<ad::Index>();
    const auto offset = t.at("offset").get<std::size_t>();
    if (rows < 0 || cols < 0) throw CheckpointError("checkpoint: negative tensor shape");
    check_range(offset, static_cast<std::size_t>(rows * cols));
    Array a(rows, cols);
    for (ad::Index i = 0; i < a.size(); ++i) a.data()[i] = at(offset + static_cast<std::size_t>(i));
    return a;
  }
  std::vector<Edge> edges(const json& t) const {
    const auto count = t.at("count").get<std::size_t>(), offset = t.at("offset").get<std::size_t>();
    check_range(offset, 3 * count);
    std::vector<Edge> out(count);
    for (std::size_t i = 0; i < count; ++i) {
      out[i] = {static_cast<NodeId>(at(offset + 3 * i)), static_cast<NodeId>(at(offset + 3 * i + 1)),
                static_cast<Timestamp>(at(offset + 3 * i + 2))};
    }
    return out;
  }
  std::size_t count() const { return count_; }

 private:
  void check_range(std::size_t offset, std::size_t n) const {
    if (offset > count_ || n > count_ - offset) throw CheckpointError("checkpoint: tensor extends past the data");
  }
  const std::string& bytes_;
  std::size_t start_;
  std::size_t count_ = 0;
};

json model_json(const ModelConfig& m) {
  return {{"dim", m.dim},
          {"users", m.users},
          {"items", m.items},
          {"internal_items", m.internal_items},
          {"positions", m.positions},
          {"user_field_sizes", m.user_field_sizes},
          {"item_field_sizes", m.item_field_sizes},
          {"field_salt", m.field_salt},
          {"short_k", m.short_k},
          {"long_k", m.long_k},
          {"slope", m.slope},
          {"embed_init", m.embed_init},
          {"tower", m.tower},
          {"variant", variant_name(m.variant)}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.dim = j.at("dim").get<int>();
  m.users = j.at("users").get<int>();
  m.items = j.at("items").get<int>();
  m.internal_items = j.at("internal_items").get<int>();
  m.positions = j.at("positions").get<int>();
  m.user_field_sizes = j.at("user_field_sizes").get<FieldSizes>();
  m.item_field_sizes = j.at("item_field_sizes").get<FieldSizes>();
  m.field_salt = j.at("field_salt").get<std::uint64_t>();
  m.short_k = j.at("short_k").get<std::size_t>();
  m.long_k = j.at("long_k").get<std::size_t>();
  m.slope = j.at("slope").get<double>();
  m.embed_init = j.at("embed_init").get<double>();
  m.tower = j.at("tower").get<std::array<int, 2>>();
  m.variant = parse_variant(j.at("variant").get<std::string>());
  return m;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.accumulators.size() != ckpt.params.size()) {
    throw CheckpointError("checkpoint: accumulator count does not match the parameters");
  }
  Writer w;
  json params = json::array();
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const Array& acc = ckpt.accumulators[i];
    if (acc.rows() != ckpt.params.values[i].rows() || acc.cols() != ckpt.params.values[i].cols()) {
      throw CheckpointError("checkpoint: accumulator shape mismatch for " + ckpt.params.names[i]);
    }
    json p = {{"name", ckpt.params.names[i]}, {"group", group_name(ckpt.params.groups[i])}};
    p["value"] = w.tensor(ckpt.params.values[i]);
    p["adagrad"] = w.tensor(acc);
    params.push_back(std::move(p));
  }
  json manifest = {{"format", kFormat},
                   {"model", model_json(ckpt.model)},
                   {"trainer", ckpt.trainer.canonical()},
                   {"config_hash", ckpt.config_hash},
                   {"last_full_train_day", ckpt.last_full_train_day},
                   {"last_online_hour", ckpt.last_online_hour},
                   {"params", std::move(params)}};
  manifest["long_user_cache"] = w.tensor(ckpt.long_user_cache);
  manifest["short_edges"] = w.edges(ckpt.short_edges);
  manifest["value_count"] = w.values().size();

  const std::string text = manifest.dump();
  std::string out(kMagic);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + 8 * w.values().size());
  for (double v : w.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagic.size() + 8 || bytes.compare(0, kMagic.size(), kMagic) != 0) {
    throw CheckpointError("checkpoint: bad magic");
  }
  const std::uint64_t length = get_u64(bytes, kMagic.size());
  const std::size_t manifest_start = kMagic.size() + 8;
  if (length > bytes.size() - manifest_start) throw CheckpointError("checkpoint: truncated manifest");
  Checkpoint ckpt;
  try {
    const json m = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(manifest_start),
                               bytes.begin() + static_cast<std::ptrdiff_t>(manifest_start + length));
    if (m.at("format").get<int>() != kFormat) throw CheckpointError("checkpoint: unsupported format");
    const Reader r(bytes, manifest_start + length);
    if (m.at("value_count").get<std::size_t>() != r.count()) throw CheckpointError("checkpoint: data size mismatch");

    ckpt.model = model_from_json(m.at("model"));
    ckpt.trainer = TrainerConfig::from_config(KeyValueConfig::parse(m.at("trainer").get<std::string>(), "checkpoint"));
    ckpt.config_hash = m.at("config_hash").get<std::string>();
    ckpt.last_full_train_day = m.at("last_full_train_day").get<int>();
    ckpt.last_online_hour = m.at("last_online_hour").get<Timestamp>();
    for (const json& p : m.at("params")) {
      const std::string group = p.at("group").get<std::string>();
      ParamGroup g{};
      if (group == group_name(ParamGroup::kShort)) {
        g = ParamGroup::kShort;
      } else if (group == group_name(ParamGroup::kFusion)) {
        g = ParamGroup::kFusion;
      } else if (group == group_name(ParamGroup::kLong)) {
        g = ParamGroup::kLong;
      } else {
        throw CheckpointError("checkpoint: unknown parameter group '" + group + "'");
      }
      ckpt.params.add(p.at("name").get<std::string>(), g, r.tensor(p.at("value")));
      ckpt.accumulators.push_back(r.tensor(p.at("adagrad")));
    }
    ckpt.long_user_cache = r.tensor(m.at("long_user_cache"));
    ckpt.short_edges = r.edges(m.at("short_edges"));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  Model(ckpt.model).check_layout(ckpt.params);
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace lsttm
