#include "sarjepa/checkpoint.hpp"

#include <bit>
#include <fstream>

#include "sarjepa/errors.hpp"
#include "sarjepa/image.hpp"

namespace sarjepa {

namespace fs = std::filesystem;

void save_checkpoint(const fs::path& dir, const ModelState<float>& state, const CheckpointMeta& meta) {
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  {
    std::ofstream bin(tmp / "tensors.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + (tmp / "tensors.bin").string());
    for (const auto& p : state.parameters()) {
      const auto n = static_cast<std::size_t>(p.value->size());
      tensors.push_back({{"name", p.info.name},
                         {"shape", {p.value->rows(), p.value->cols()}},
                         {"offset", offset}});
      write_le_floats(bin, p.value->data(), n);
      offset += n * 4;
    }
  }
  nlohmann::json manifest = {{"format", "sarjepa-checkpoint-1"},
                             {"config", to_json(state.config)},
                             {"tensors", tensors},
                             {"global_step", meta.global_step},
                             {"rng", {{"seed", meta.seed}, {"step", meta.global_step}}},
                             {"extra", meta.extra}};
  {
    std::ofstream js(tmp / "manifest.json");
    js << manifest.dump(2) << "\n";
    if (!js) throw std::runtime_error("cannot write manifest");
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream js(dir / "manifest.json");
  require(bool(js), "missing checkpoint manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad checkpoint manifest: ") + e.what());
  }
  Checkpoint ck;
  ck.state = ModelState<float>::zeros(model_config_from_json(manifest.at("config")));
  ck.meta.global_step = manifest.value("global_step", std::int64_t{0});
  ck.meta.seed = manifest.at("rng").value("seed", std::uint64_t{0});
  ck.meta.extra = manifest.value("extra", nlohmann::json::object());

  std::ifstream bin(dir / "tensors.bin", std::ios::binary);
  require(bool(bin), "missing tensors.bin in " + dir.string());
  const auto& entries = manifest.at("tensors");
  auto params = ck.state.parameters();
  require(entries.size() == params.size(), "checkpoint tensor count does not match its config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    require(e.at("name").get<std::string>() == params[i].info.name,
            "checkpoint tensor order mismatch at " + params[i].info.name);
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    require(shape.size() == 2 && shape[0] == params[i].value->rows() && shape[1] == params[i].value->cols(),
            "checkpoint tensor shape mismatch for " + params[i].info.name);
    bin.seekg(static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    read_le_floats(bin, params[i].value->data(), static_cast<std::size_t>(params[i].value->size()));
  }
  return ck;
}

std::uint64_t state_hash(const ModelState<float>& state) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : state.parameters()) {
    for (Eigen::Index i = 0; i < p.value->size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(p.value->data()[i]);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

}  // namespace sarjepa
