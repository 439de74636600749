#pragma once

// Binary checkpoint container. Layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "VLGENCKP"
//   offset 8   u32       format version (currently 1)
//   offset 12  u64       manifest length M
//   offset 20  M bytes   manifest, UTF-8 JSON
//   ...        P bytes   payload: tensors back to back, column-major
//   end - 8    u64       FNV-1a 64 of every preceding byte
//
// The manifest records the hyperparameters, both vocabularies (as code
// point arrays), the field-name conventions, the element type and, per
// tensor, its name, shape and byte offset into the payload. docs/checkpoint.md
// has the full field list.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlgen/corpus.hpp"
#include "vlgen/errors.hpp"
#include "vlgen/nn/params.hpp"
#include "vlgen/tokenizer.hpp"

#if defined(__unix__) || defined(__APPLE__)
#include <unistd.h>
#endif

namespace vlgen {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'V', 'L', 'G', 'E', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// How source records were normalized for this model.
struct MappingConventions {
  std::string string_prefix{kStringPrefix};
  std::string numeric_prefix{kNumericPrefix};
  std::string key_order = "string-then-numeric";
  std::size_t max_len = kDefaultMaxLen;

  friend bool operator==(const MappingConventions&, const MappingConventions&) = default;
};

template <typename T>
struct Checkpoint {
  nn::ModelParams<T> params;
  Vocabs vocabs;
  MappingConventions conventions;
  std::string id;  // hex checksum of the file contents
};

namespace detail {

inline std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

inline nlohmann::json vocab_to_json(const Vocabulary& v) {
  std::vector<std::uint32_t> cps(v.symbols().begin(), v.symbols().end());
  return cps;
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
  std::u32string cps;
  for (const auto& c : j) cps.push_back(static_cast<char32_t>(c.get<std::uint32_t>()));
  return Vocabulary(std::move(cps));
}

template <typename U>
void append_raw(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U read_raw(const std::string& in, std::size_t offset) {
  U v;
  std::memcpy(&v, in.data() + offset, sizeof(U));
  return v;
}

}  // namespace detail

/// The complete checkpoint file as bytes.
template <typename T>
std::string serialize_checkpoint(const nn::ModelParams<T>& params, const Vocabs& vocabs,
                                 const MappingConventions& conv) {
  const auto& hp = params.hyper;
  if (static_cast<std::size_t>(hp.src_vocab) != vocabs.source.size() ||
      static_cast<std::size_t>(hp.tgt_vocab) != vocabs.target.size())
    throw DimensionMismatch("parameter vocabulary sizes do not match the vocabularies being saved");

  nlohmann::json tensors = nlohmann::json::array();
  std::string payload;
  params.for_each([&](const std::string& name, const nn::Mat<T>& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", payload.size()}});
    payload.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(T));
  });

  const nlohmann::json manifest = {
      {"format", "vlgen-checkpoint"},
      {"dtype", detail::dtype_name<T>()},
      {"hyper",
       {{"src_vocab", hp.src_vocab},
        {"tgt_vocab", hp.tgt_vocab},
        {"emb", hp.emb},
        {"cell", hp.cell},
        {"attn", hp.attn},
        {"enc_layers", hp.enc_layers},
        {"dec_layers", hp.dec_layers}}},
      {"vocab", {{"source", detail::vocab_to_json(vocabs.source)}, {"target", detail::vocab_to_json(vocabs.target)}}},
      {"specials", {{"pad", kPad}, {"sos", kSos}, {"eos", kEos}, {"unk", kUnk}}},
      {"conventions",
       {{"string_prefix", conv.string_prefix},
        {"numeric_prefix", conv.numeric_prefix},
        {"key_order", conv.key_order},
        {"max_len", conv.max_len}}},
      {"tensors", tensors},
      {"payload_bytes", payload.size()},
  };
  const std::string mtext = manifest.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::append_raw<std::uint32_t>(out, kCheckpointVersion);
  detail::append_raw<std::uint64_t>(out, mtext.size());
  out += mtext;
  out += payload;
  detail::append_raw<std::uint64_t>(out, detail::fnv1a(out.data(), out.size()));
  return out;
}

/// Writes atomically (temporary file, then rename) and returns the
/// checkpoint id.
template <typename T>
std::string save_checkpoint(const nn::ModelParams<T>& params, const Vocabs& vocabs, const MappingConventions& conv,
                            const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(params, vocabs, conv);
  std::filesystem::path tmp = path;
#if defined(__unix__) || defined(__APPLE__)
  tmp += ".tmp" + std::to_string(::getpid());
#else
  tmp += ".tmp";
#endif
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
  return detail::hex64(detail::read_raw<std::uint64_t>(bytes, bytes.size() - 8));
}

template <typename T>
Checkpoint<T> parse_checkpoint(const std::string& bytes) {
  constexpr std::size_t kHeader = sizeof kCheckpointMagic + 4 + 8;
  if (bytes.size() < kHeader + 8) throw CorruptCheckpoint("file too short to be a checkpoint");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CorruptCheckpoint("bad magic: not a vlgen checkpoint");
  const auto version = detail::read_raw<std::uint32_t>(bytes, 8);
  if (version != kCheckpointVersion)
    throw CorruptCheckpoint("unsupported checkpoint version " + std::to_string(version));
  const auto mlen = detail::read_raw<std::uint64_t>(bytes, 12);
  if (mlen > bytes.size() - kHeader - 8) throw CorruptCheckpoint("truncated checkpoint: manifest runs past end of file");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(kHeader, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("unreadable manifest: ") + e.what());
  }

  Checkpoint<T> ck;
  std::string dtype;
  std::size_t payload_bytes = 0;
  try {
    const auto& h = manifest.at("hyper");
    nn::Hyper hp;
    hp.src_vocab = h.at("src_vocab").get<int>();
    hp.tgt_vocab = h.at("tgt_vocab").get<int>();
    hp.emb = h.at("emb").get<int>();
    hp.cell = h.at("cell").get<int>();
    hp.attn = h.at("attn").get<int>();
    hp.enc_layers = h.at("enc_layers").get<int>();
    hp.dec_layers = h.at("dec_layers").get<int>();
    ck.vocabs.source = detail::vocab_from_json(manifest.at("vocab").at("source"));
    ck.vocabs.target = detail::vocab_from_json(manifest.at("vocab").at("target"));
    const auto& c = manifest.at("conventions");
    ck.conventions.string_prefix = c.at("string_prefix").get<std::string>();
    ck.conventions.numeric_prefix = c.at("numeric_prefix").get<std::string>();
    ck.conventions.key_order = c.at("key_order").get<std::string>();
    ck.conventions.max_len = c.at("max_len").get<std::size_t>();
    dtype = manifest.at("dtype").get<std::string>();
    payload_bytes = manifest.at("payload_bytes").get<std::size_t>();

    if (static_cast<std::size_t>(hp.src_vocab) != ck.vocabs.source.size())
      throw CorruptCheckpoint("source vocabulary has " + std::to_string(ck.vocabs.source.size()) +
                              " entries but the tensors are sized for " + std::to_string(hp.src_vocab));
    if (static_cast<std::size_t>(hp.tgt_vocab) != ck.vocabs.target.size())
      throw CorruptCheckpoint("target vocabulary has " + std::to_string(ck.vocabs.target.size()) +
                              " entries but the tensors are sized for " + std::to_string(hp.tgt_vocab));
    ck.params = nn::ModelParams<T>::zeros(hp);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("incomplete manifest: ") + e.what());
  } catch (const DataError& e) {
    throw CorruptCheckpoint(std::string("invalid manifest: ") + e.what());
  } catch (const DimensionMismatch& e) {
    throw CorruptCheckpoint(std::string("invalid hyperparameters: ") + e.what());
  }
  if (dtype != "f32" && dtype != "f64") throw CorruptCheckpoint("unknown dtype '" + dtype + "'");
  const std::size_t elem = dtype == "f32" ? 4 : 8;

  const std::size_t payload_at = kHeader + mlen;
  if (bytes.size() != payload_at + payload_bytes + 8)
    throw CorruptCheckpoint("truncated checkpoint: expected " + std::to_string(payload_at + payload_bytes + 8) +
                            " bytes, found " + std::to_string(bytes.size()));
  const auto stored = detail::read_raw<std::uint64_t>(bytes, bytes.size() - 8);
  if (stored != detail::fnv1a(bytes.data(), bytes.size() - 8)) throw CorruptCheckpoint("checksum mismatch");
  ck.id = detail::hex64(stored);

  const auto& tensors = manifest.at("tensors");
  std::size_t k = 0;
  ck.params.for_each([&](const std::string& name, nn::Mat<T>& m) {
    if (k >= tensors.size()) throw CorruptCheckpoint("missing tensor '" + name + "'");
    const auto& t = tensors[k++];
    const auto tname = t.at("name").get<std::string>();
    const auto rows = t.at("rows").get<Eigen::Index>(), cols = t.at("cols").get<Eigen::Index>();
    const auto offset = t.at("offset").get<std::size_t>();
    if (tname != name) throw CorruptCheckpoint("expected tensor '" + name + "', found '" + tname + "'");
    if (rows != m.rows() || cols != m.cols())
      throw CorruptCheckpoint("tensor '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                              ", expected " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    const std::size_t n = static_cast<std::size_t>(m.size());
    if (offset + n * elem > payload_bytes) throw CorruptCheckpoint("tensor '" + name + "' runs past the payload");
    const char* src = bytes.data() + payload_at + offset;
    if (elem == 4) {
      Eigen::MatrixXf buf(rows, cols);
      std::memcpy(buf.data(), src, n * elem);
      m = buf.template cast<T>();
    } else {
      Eigen::MatrixXd buf(rows, cols);
      std::memcpy(buf.data(), src, n * elem);
      m = buf.template cast<T>();
    }
  });
  if (k != tensors.size()) throw CorruptCheckpoint("checkpoint has " + std::to_string(tensors.size() - k) + " unexpected tensors");
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptCheckpoint("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint<T>(bytes);
  } catch (const CorruptCheckpoint& e) {
    throw CorruptCheckpoint(path.string() + ": " + e.what());
  }
}

}  // namespace vlgen
