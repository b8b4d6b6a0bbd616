#include "learn/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "learn/error.hpp"

namespace learn {

namespace {

constexpr std::array<char, 8> kMagic = {'L', 'E', 'A', 'R', 'N', 'C', 'K', '1'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 8);
}

std::uint64_t get_u64(const char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["config"] = ck.config;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : ck.tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * 8;
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write checkpoint " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : ck.tensors) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(out, m(r, c));
  }
  if (!out) throw Error(ErrorCode::IoError, "failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto bad = [&](const std::string& why) { return Error(ErrorCode::ParseError, path.string() + ": " + why); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) throw bad("not a checkpoint");
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw bad("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw bad(e.what());
  }
  if (header.value("format_version", 0) != kCheckpointFormatVersion) throw bad("unsupported format version");
  const std::size_t data_start = 16 + header_len;
  Checkpoint ck;
  ck.config = header.value("config", nlohmann::json::object());
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    if (rows < 0 || cols < 0) throw bad("negative tensor shape");
    const std::uint64_t need = static_cast<std::uint64_t>(rows * cols) * 8;
    if (data_start + offset + need > bytes.size()) throw bad("truncated tensor " + t.at("name").get<std::string>());
    Eigen::MatrixXd m(rows, cols);
    const char* p = bytes.data() + data_start + offset;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c, p += 8) m(r, c) = std::bit_cast<double>(get_u64(p));
    ck.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
  }
  return ck;
}

nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
  return {{"kind", c.kind == EncoderKind::Toy ? "toy" : "pretrained"},
          {"dim", c.dim},
          {"seed", c.seed},
          {"weights_path", c.weights_path}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "toy") {
    c.kind = EncoderKind::Toy;
  } else if (kind == "pretrained") {
    c.kind = EncoderKind::Pretrained;
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown encoder kind '" + kind + "'");
  }
  c.dim = j.at("dim").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.weights_path = j.value("weights_path", std::string{});
  return c;
}

Checkpoint bundle_to_checkpoint(const ModelBundle& b) {
  Checkpoint ck;
  ck.config["encoder"] = encoder_config_to_json(b.encoder);
  auto take = [&](const nn::ParameterSet& ps, const std::string& prefix) {
    for (const auto& [name, v] : ps.entries()) ck.tensors[prefix + name] = v.value();
  };
  if (b.decoder) {
    ck.config["decoder"] = {{"config", b.decoder->config().to_json()},
                            {"text_dim", b.decoder->text_dim()},
                            {"region_dim", b.decoder->region_dim()}};
    take(b.decoder->parameters(), "decoder.");
  }
  if (b.generator) {
    ck.config["generator"] = {{"config", b.generator->config().to_json()}, {"text_dim", b.generator->text_dim()}};
    take(b.generator->parameters(), "generator.");
  }
  return ck;
}

ModelBundle bundle_from_checkpoint(const Checkpoint& ck) {
  ModelBundle b;
  try {
    b.encoder = encoder_config_from_json(ck.config.at("encoder"));
    if (ck.config.contains("decoder")) {
      const auto& d = ck.config.at("decoder");
      b.decoder = std::make_shared<LayoutDecoderModel>(LayoutDecoderConfig::from_json(d.at("config")),
                                                       d.at("text_dim").get<int>(), d.at("region_dim").get<int>(), 0);
      b.decoder->parameters().load(ck.tensors, "decoder.");
    }
    if (ck.config.contains("generator")) {
      const auto& g = ck.config.at("generator");
      b.generator = std::make_shared<GeneratorModel>(DiffusionConfig::from_json(g.at("config")),
                                                     g.at("text_dim").get<int>(), 0);
      b.generator->parameters().load(ck.tensors, "generator.");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("checkpoint config: ") + e.what());
  }
  return b;
}

void save_bundle(const std::filesystem::path& path, const ModelBundle& b) { write_checkpoint(path, bundle_to_checkpoint(b)); }

ModelBundle load_bundle(const std::filesystem::path& path) { return bundle_from_checkpoint(read_checkpoint(path)); }

}  // namespace learn
