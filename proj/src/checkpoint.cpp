#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "rad/errors.hpp"
#include "rad/model.hpp"

namespace rad {

namespace {

constexpr std::array<char, 8> kMagic{'R', 'A', 'D', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::string name)
      : bytes_(bytes), name_(std::move(name)) {}

  std::uint32_t u32() {
    need(4, "header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8, "header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  const unsigned char* take(std::size_t n, const char* what) {
    need(n, what);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw ParseError(name_ + ": truncated checkpoint (" + what + ")");
    }
  }
  const std::vector<unsigned char>& bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a(const unsigned char* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void put_payload(Writer& w, double v, PayloadType type) {
  if (type == PayloadType::F32) {
    w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  } else {
    w.u64(std::bit_cast<std::uint64_t>(v));
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const Weights<double>& weights, PayloadType payload) {
  check_weights(cfg, weights);
  Writer w;
  w.raw(kMagic.data(), kMagic.size());
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(cfg.head));
  for (std::size_t v : {cfg.n_layer, cfg.d_model, cfg.n_head, cfg.d_ff, cfg.vocab, cfg.max_ctx}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u64(Vocabulary::hash());
  w.u32(static_cast<std::uint32_t>(payload));
  w.u64(weights.scalar_count());
  const std::size_t header = w.bytes().size();
  for (const auto* p : weights.params()) {
    for (double v : p->data()) put_payload(w, v, payload);
  }
  const auto& bytes = w.bytes();
  w.u64(fnv1a(bytes.data() + header, bytes.size() - header));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(w.bytes().data()),
            static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw ParseError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<HeadKind> expected_head) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                         std::istreambuf_iterator<char>()};
  const std::string name = path.string();
  Reader r(bytes, name);
  if (std::memcmp(r.take(kMagic.size(), "magic"), kMagic.data(), kMagic.size()) != 0) {
    throw ParseError(name + ": not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CompatibilityError(name + ": checkpoint version " + std::to_string(version) +
                             ", expected " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  const std::uint32_t head = r.u32();
  if (head > 1) throw ParseError(name + ": unknown head kind " + std::to_string(head));
  ck.cfg.head = static_cast<HeadKind>(head);
  ck.cfg.n_layer = r.u32();
  ck.cfg.d_model = r.u32();
  ck.cfg.n_head = r.u32();
  ck.cfg.d_ff = r.u32();
  ck.cfg.vocab = r.u32();
  ck.cfg.max_ctx = r.u32();
  ck.vocab_hash = r.u64();
  if (ck.vocab_hash != Vocabulary::hash() || ck.cfg.vocab != Vocabulary::kSize) {
    throw CompatibilityError(name + ": vocabulary does not match this build");
  }
  if (expected_head && *expected_head != ck.cfg.head) {
    throw CompatibilityError(name + ": expected a " + to_string(*expected_head) +
                             " head, checkpoint holds a " + to_string(ck.cfg.head) + " head");
  }
  try {
    ck.cfg.validate();
  } catch (const ConfigError& e) {
    throw ParseError(name + ": " + e.what());
  }
  const std::uint32_t ptype = r.u32();
  if (ptype != 4 && ptype != 8) throw ParseError(name + ": unknown payload type");
  ck.payload = static_cast<PayloadType>(ptype);
  const std::uint64_t count = r.u64();

  const std::uint64_t d = ck.cfg.d_model, ff = ck.cfg.d_ff, out_dim = ck.cfg.out_dim();
  const std::uint64_t per_layer = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * ff + ff) +
                                  (ff * d + d);
  const std::uint64_t expected = ck.cfg.vocab * d + ck.cfg.max_ctx * d +
                                 ck.cfg.n_layer * per_layer + 2 * d + d * out_dim + out_dim;
  if (count != expected) throw ParseError(name + ": parameter count does not match header config");
  const std::size_t width = ptype;
  if (r.remaining() / width < count || r.remaining() - count * width < 8) {
    throw ParseError(name + ": truncated checkpoint (payload)");
  }
  ck.weights = init_weights<double>(ck.cfg, 0);
  const unsigned char* payload = r.take(count * width, "payload");
  std::size_t at = 0;
  for (auto* p : ck.weights.params()) {
    for (auto& v : p->mutable_data()) {
      const unsigned char* b = payload + at * width;
      if (width == 4) {
        std::uint32_t u = 0;
        for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        v = static_cast<double>(std::bit_cast<float>(u));
      } else {
        std::uint64_t u = 0;
        for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        v = std::bit_cast<double>(u);
      }
      ++at;
    }
  }
  const std::uint64_t stored = r.u64();
  const std::uint64_t actual = fnv1a(payload, count * width);
  if (stored != actual) throw ParseError(name + ": checkpoint payload hash mismatch");
  if (r.remaining() != 0) throw ParseError(name + ": trailing bytes after checkpoint");
  ck.content_hash = actual;
  return ck;
}

}  // namespace rad
