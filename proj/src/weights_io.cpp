// SPDX-License-Identifier: Apache-2.0
#include "qacirc/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>

#include "json.hpp"
#include "qacirc/util.hpp"

namespace qacirc {

namespace {

using nlohmann::json;

constexpr std::string_view kMagic = "QACM";
constexpr std::uint16_t kVersion = 1;

// Every tensor in file order, with its expected shape.
// W is ModelWeights or const ModelWeights; fn receives the tensor storage.
template <typename W, typename Fn>
void for_each_tensor(W& w, Fn&& fn) {
  fn("tok_embed", {w.tok_embed.rows(), w.tok_embed.cols()}, w.tok_embed.data());
  fn("pos_embed", {w.pos_embed.rows(), w.pos_embed.cols()}, w.pos_embed.data());
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& lw = w.layers[l];
    const std::string lp = "layers." + std::to_string(l) + ".";
    for (std::size_t h = 0; h < lw.heads.size(); ++h) {
      auto& hw = lw.heads[h];
      const std::string hp = lp + "heads." + std::to_string(h) + ".";
      fn(hp + "wq", {hw.wq.rows(), hw.wq.cols()}, hw.wq.data());
      fn(hp + "wk", {hw.wk.rows(), hw.wk.cols()}, hw.wk.data());
      fn(hp + "wv", {hw.wv.rows(), hw.wv.cols()}, hw.wv.data());
      fn(hp + "wo", {hw.wo.rows(), hw.wo.cols()}, hw.wo.data());
    }
    fn(lp + "attn_norm", {lw.attn_norm.size()}, lw.attn_norm);
    fn(lp + "mlp_norm", {lw.mlp_norm.size()}, lw.mlp_norm);
    fn(lp + "mlp_in", {lw.mlp_in.rows(), lw.mlp_in.cols()}, lw.mlp_in.data());
    fn(lp + "mlp_out", {lw.mlp_out.rows(), lw.mlp_out.cols()}, lw.mlp_out.data());
  }
  fn("unembed", {w.unembed.rows(), w.unembed.cols()}, w.unembed.data());
}

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},   {"d_model", c.d_model},
              {"d_head", c.d_head},         {"d_mlp", c.d_mlp},       {"vocab_size", c.vocab_size},
              {"max_seq", c.max_seq},       {"rng_seed", c.rng_seed},
              {"norm", c.norm == NormKind::Rms ? "rms" : "none"}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq = j.at("max_seq").get<int>();
  c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  const std::string norm = j.at("norm").get<std::string>();
  if (norm == "rms") {
    c.norm = NormKind::Rms;
  } else if (norm == "none") {
    c.norm = NormKind::None;
  } else {
    throw Error(ErrorCode::FormatError, "unknown norm " + norm);
  }
  return c;
}

json head_to_json(HeadAddress a) { return json::array({a.layer, a.head}); }
HeadAddress head_from_json(const json& j) { return {j.at(0).get<int>(), j.at(1).get<int>()}; }

json fixture_to_json(const FixtureInfo& f) {
  const TokenLayout& l = f.layout;
  return json{{"layout",
               {{"pad", l.pad}, {"mask", l.mask}, {"sep", l.sep}, {"qmark", l.qmark}, {"eos", l.eos},
                {"subject_begin", l.subject_begin}, {"n_subjects", l.n_subjects},
                {"answer_begin", l.answer_begin}, {"n_answers", l.n_answers},
                {"filler_begin", l.filler_begin}, {"n_fillers", l.n_fillers}}},
              {"memory_table", f.memory.answer_of_subject},
              {"n_relations", f.n_relations},
              {"copy_head", head_to_json(f.copy_head)},
              {"prev_head", head_to_json(f.prev_head)},
              {"context_head", head_to_json(f.context_head)},
              {"memory_layer", f.memory_layer}};
}

FixtureInfo fixture_from_json(const json& j) {
  FixtureInfo f;
  const json& l = j.at("layout");
  f.layout.pad = l.at("pad").get<int>();
  f.layout.mask = l.at("mask").get<int>();
  f.layout.sep = l.at("sep").get<int>();
  f.layout.qmark = l.at("qmark").get<int>();
  f.layout.eos = l.at("eos").get<int>();
  f.layout.subject_begin = l.at("subject_begin").get<int>();
  f.layout.n_subjects = l.at("n_subjects").get<int>();
  f.layout.answer_begin = l.at("answer_begin").get<int>();
  f.layout.n_answers = l.at("n_answers").get<int>();
  f.layout.filler_begin = l.at("filler_begin").get<int>();
  f.layout.n_fillers = l.at("n_fillers").get<int>();
  f.memory.answer_of_subject = j.at("memory_table").get<std::vector<int>>();
  f.n_relations = j.at("n_relations").get<int>();
  f.copy_head = head_from_json(j.at("copy_head"));
  f.prev_head = head_from_json(j.at("prev_head"));
  f.context_head = head_from_json(j.at("context_head"));
  f.memory_layer = j.at("memory_layer").get<int>();
  return f;
}

void put_le(std::string& out, std::uint64_t value, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::string_view in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

}  // namespace

std::string serialize_model(const ModelWeights& weights, const FixtureInfo* fixture) {
  weights.validate();
  json dir = json::array();
  std::string data;
  for_each_tensor(weights, [&](const std::string& name, std::vector<std::size_t> shape,
                               const auto& values) {
    dir.push_back({{"name", name}, {"shape", shape}, {"offset", data.size()}});
    for (double v : values) put_le(data, std::bit_cast<std::uint64_t>(v), 8);
  });
  json header{{"config", config_to_json(weights.config)}, {"tensors", dir}};
  if (fixture != nullptr) header["fixture"] = fixture_to_json(*fixture);
  const std::string text = header.dump();

  std::string out(kMagic);
  put_le(out, kVersion, 2);
  put_le(out, text.size(), 4);
  out += text;
  out += data;
  return out;
}

LoadedModel parse_model(std::string_view bytes) {
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw Error(ErrorCode::FormatError, "bad magic");
  }
  if (bytes.size() < 10) throw Error(ErrorCode::CorruptWeights, "truncated preamble");
  const auto version = static_cast<std::uint16_t>(get_le(bytes, 4, 2));
  if (version != kVersion) throw Error(ErrorCode::FormatError, "unsupported version " + std::to_string(version));
  const std::size_t header_len = get_le(bytes, 6, 4);
  if (10 + header_len > bytes.size()) throw Error(ErrorCode::CorruptWeights, "truncated header");

  json header;
  try {
    header = json::parse(bytes.substr(10, header_len));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("header json: ") + e.what());
  }

  LoadedModel loaded;
  try {
    const ModelConfig config = config_from_json(header.at("config"));
    config.validate();
    loaded.weights = ModelWeights::zeros(config);
    if (header.contains("fixture")) loaded.fixture = fixture_from_json(header.at("fixture"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("header fields: ") + e.what());
  }

  const std::string_view data = bytes.substr(10 + header_len);
  std::map<std::string, json> directory;
  for (const json& entry : header.at("tensors")) directory[entry.at("name").get<std::string>()] = entry;

  ModelWeights& w = loaded.weights;
  std::size_t consumed = 0;
  for_each_tensor(w, [&](const std::string& name, std::vector<std::size_t> shape,
                         std::vector<double>& dst) {
    auto it = directory.find(name);
    if (it == directory.end()) throw Error(ErrorCode::CorruptWeights, "missing tensor " + name);
    if (it->second.at("shape").get<std::vector<std::size_t>>() != shape) {
      throw Error(ErrorCode::CorruptWeights, "shape mismatch for " + name);
    }
    const std::size_t offset = it->second.at("offset").get<std::size_t>();
    const std::size_t nbytes = 8 * dst.size();
    if (offset > data.size() || nbytes > data.size() - offset) {
      throw Error(ErrorCode::CorruptWeights, "tensor " + name + " runs past end of file");
    }
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] = std::bit_cast<double>(get_le(data, offset + 8 * i, 8));
    }
    consumed += nbytes;
  });
  if (consumed != data.size()) throw Error(ErrorCode::CorruptWeights, "trailing or missing data");
  w.validate();
  return loaded;
}

void save_model(const std::filesystem::path& path, const ModelWeights& weights,
                const FixtureInfo* fixture) {
  write_file_atomic(path, serialize_model(weights, fixture));
}

LoadedModel load_model(const std::filesystem::path& path) { return parse_model(read_file(path)); }

}  // namespace qacirc
