#pragma once

// Versioned binary snapshot of a model, optionally with optimizer state.
//
// Layout (little-endian):
//   8 bytes  magic "TLABSNAP"
//   u32      format version (1)
//   u32      JSON header length, then that many bytes of JSON holding the
//            model config, the recorded init variances and integer metadata
//   u32      array count, then per array:
//              u16 name length, name bytes, u64 rows, u64 cols,
//              rows*cols doubles (raw IEEE-754 bytes)
// Doubles are written verbatim, so save -> load -> save is bit-identical.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tlab/blocks.hpp"

namespace tlab {

struct Snapshot {
  Model model;
  // extra named arrays (optimizer moments etc.), name -> (rows, cols, data)
  std::map<std::string, std::pair<std::pair<std::uint64_t, std::uint64_t>, std::vector<double>>>
      extra;
  std::map<std::string, std::int64_t> meta;  // step counters and similar
};

namespace detail_ckpt {

constexpr char kMagic[8] = {'T', 'L', 'A', 'B', 'S', 'N', 'A', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

inline void put_array(std::ostream& os, const std::string& name, std::uint64_t rows,
                      std::uint64_t cols, const std::vector<double>& data) {
  if (data.size() != rows * cols) throw std::logic_error("checkpoint: array size mismatch");
  put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint64_t>(os, rows);
  put<std::uint64_t>(os, cols);
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"variant", to_string(c.variant)}, {"n_enc", c.n_enc},       {"n_dec", c.n_dec},
          {"d_model", c.d_model},            {"heads", c.heads},       {"d_ff", c.d_ff},
          {"src_vocab", c.src_vocab},        {"tgt_vocab", c.tgt_vocab},
          {"max_len", c.max_len},            {"dropout", c.dropout},
          {"scaled_attention", c.scaled_attention},                    {"ln_eps", c.ln_eps}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.n_enc = j.at("n_enc").get<int>();
  c.n_dec = j.at("n_dec").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.heads = j.at("heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.src_vocab = j.at("src_vocab").get<int>();
  c.tgt_vocab = j.at("tgt_vocab").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.scaled_attention = j.at("scaled_attention").get<bool>();
  c.ln_eps = j.at("ln_eps").get<double>();
  return c;
}

}  // namespace detail_ckpt

inline void save_checkpoint(const std::string& path, const Snapshot& snap) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(detail_ckpt::kMagic, 8);
  detail_ckpt::put<std::uint32_t>(f, detail_ckpt::kVersion);
  nlohmann::json hdr;
  hdr["config"] = detail_ckpt::config_to_json(snap.model.cfg);
  hdr["init_var"] = snap.model.init_var;
  hdr["meta"] = snap.meta;
  std::string hs = hdr.dump();
  detail_ckpt::put<std::uint32_t>(f, static_cast<std::uint32_t>(hs.size()));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  auto params = snap.model.named_params();
  detail_ckpt::put<std::uint32_t>(f, static_cast<std::uint32_t>(params.size() + snap.extra.size()));
  for (auto& [name, t] : params) detail_ckpt::put_array(f, name, t.rows(), t.cols(), t.values());
  for (auto& [name, a] : snap.extra)
    detail_ckpt::put_array(f, name, a.first.first, a.first.second, a.second);
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Snapshot load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, detail_ckpt::kMagic, 8) != 0)
    throw std::runtime_error("load_checkpoint: not a snapshot file");
  auto version = detail_ckpt::get<std::uint32_t>(f);
  if (version != detail_ckpt::kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
  auto hlen = detail_ckpt::get<std::uint32_t>(f);
  std::string hs(hlen, '\0');
  f.read(hs.data(), hlen);
  if (!f) throw std::runtime_error("load_checkpoint: truncated header");
  nlohmann::json hdr = nlohmann::json::parse(hs);

  Snapshot snap;
  snap.model = make_model(detail_ckpt::config_from_json(hdr.at("config")));
  if (hdr.contains("init_var"))
    snap.model.init_var = hdr.at("init_var").get<std::map<std::string, double>>();
  if (hdr.contains("meta")) snap.meta = hdr.at("meta").get<std::map<std::string, std::int64_t>>();

  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : snap.model.named_params()) by_name.emplace(name, t);
  std::size_t filled = 0;
  auto n_arrays = detail_ckpt::get<std::uint32_t>(f);
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    auto nlen = detail_ckpt::get<std::uint16_t>(f);
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    auto rows = detail_ckpt::get<std::uint64_t>(f);
    auto cols = detail_ckpt::get<std::uint64_t>(f);
    std::vector<double> data(rows * cols);
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("load_checkpoint: truncated array " + name);
    auto it = by_name.find(name);
    if (it != by_name.end()) {
      if (it->second.rows() != rows || it->second.cols() != cols)
        throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
      it->second.values() = std::move(data);
      ++filled;
    } else {
      snap.extra[name] = {{rows, cols}, std::move(data)};
    }
  }
  if (filled != by_name.size())
    throw std::runtime_error("load_checkpoint: missing parameters in file");
  return snap;
}

}  // namespace tlab
