#include "opro/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "opro/config.hpp"
#include "opro/errors.hpp"

namespace opro {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'O', 'P', 'R', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_raw(std::ofstream& out, const void* data, std::size_t bytes) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

void read_raw(std::ifstream& in, void* data, std::size_t bytes, const std::filesystem::path& path) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
  if (in.gcount() != static_cast<std::streamsize>(bytes)) throw FileError(path.string() + " is truncated");
}

// Eigen matrices are column-major; the payload is row-major.
void write_matrix(std::ofstream& out, const Mat& m) {
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = m;
  write_raw(out, r.data(), sizeof(double) * static_cast<std::size_t>(r.size()));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const VitModel& model, const Adam* optimizer,
                     const std::string& rng_state, const nlohmann::json& extra) {
  std::vector<std::pair<std::string, const Mat*>> entries;
  for (const auto& r : model.param_views()) entries.emplace_back(r.name, &r.tensor->value);
  if (optimizer) {
    for (const auto& [name, s] : optimizer->moments()) {
      entries.emplace_back("adam.m/" + name, &s.m);
      entries.emplace_back("adam.v/" + name, &s.v);
    }
  }
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, m] : entries) dir.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
  nlohmann::json header = {{"model", to_json(model.config())},
                           {"adapters", to_json(model.adapters())},
                           {"tensors", dir},
                           {"adam_steps", optimizer ? optimizer->steps_taken() : 0},
                           {"rng", rng_state},
                           {"extra", extra}};
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FileError("cannot write checkpoint " + tmp);
    write_raw(out, kMagic, sizeof(kMagic));
    write_raw(out, &kVersion, sizeof(kVersion));
    const std::uint64_t len = text.size();
    write_raw(out, &len, sizeof(len));
    write_raw(out, text.data(), text.size());
    for (const auto& [name, m] : entries) write_matrix(out, *m);
    if (!out) throw FileError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FileError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint " + path.string());
  char magic[8];
  read_raw(in, magic, sizeof(magic), path);
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FileError(path.string() + " is not an OPRO checkpoint");
  std::uint32_t version = 0;
  read_raw(in, &version, sizeof(version), path);
  if (version != kVersion) throw FileError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  std::uint64_t len = 0;
  read_raw(in, &len, sizeof(len), path);
  if (len > (1ULL << 30)) throw FileError(path.string() + ": implausible header length");
  std::string text(len, '\0');
  read_raw(in, text.data(), len, path);

  CheckpointData data;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    from_json(header.at("model"), data.model);
    from_json(header.at("adapters"), data.adapters);
    data.adam_steps = header.at("adam_steps").get<int>();
    data.rng_state = header.at("rng").get<std::string>();
    data.extra = header.at("extra");
    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto rows = e.at("rows").get<Index>();
      const auto cols = e.at("cols").get<Index>();
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r(rows, cols);
      read_raw(in, r.data(), sizeof(double) * static_cast<std::size_t>(r.size()), path);
      Mat m = r;
      if (name.rfind("adam.m/", 0) == 0) {
        data.adam[name.substr(7)].m = std::move(m);
      } else if (name.rfind("adam.v/", 0) == 0) {
        data.adam[name.substr(7)].v = std::move(m);
      } else {
        data.tensors.emplace(name, std::move(m));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FileError(path.string() + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw FileError(path.string() + ": " + e.what());
  }
  return data;
}

VitModel restore_model(const CheckpointData& data) {
  VitModel model(data.model, 0);
  if (data.adapters.regime != Regime::Full) model.attach_adapters(data.adapters, 0);
  for (auto& r : model.mutable_params()) {
    auto it = data.tensors.find(r.name);
    if (it == data.tensors.end()) throw FileError("checkpoint lacks parameter " + r.name);
    if (it->second.rows() != r.tensor->value.rows() || it->second.cols() != r.tensor->value.cols()) {
      throw FileError("checkpoint parameter " + r.name + " has the wrong shape");
    }
    r.tensor->value = it->second;
  }
  model.refresh();
  return model;
}

}  // namespace opro
