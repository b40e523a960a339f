#include "bmip/checkpoint.hpp"

#include <unistd.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <thread>

#include "bmip/digest.hpp"

namespace bmip {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'B', 'M', 'I', 'P'};
constexpr std::uint32_t kMaxRank = 8;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("checkpoint " + path.string() + " is truncated");
  return v;
}

void copy_into(const Tensor& source, Tensor& target, const std::string& name) {
  if (source.shape() != target.shape()) {
    throw CheckpointError("checkpoint blob " + name + " has shape " + shape_string(source.shape()) + ", expected " +
                          shape_string(target.shape()));
  }
  auto dst = target.mutable_data();
  std::copy(source.data().begin(), source.data().end(), dst.begin());
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : blobs) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::filesystem::path temporary_sibling(const std::filesystem::path& path) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." +
         std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  return tmp;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const std::filesystem::path tmp = temporary_sibling(path);
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint64_t>(os, checkpoint.config_digest);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(checkpoint.blobs.size()));
    for (const auto& [name, t] : checkpoint.blobs) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.data().size_bytes()));
    }
    if (!os.flush()) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path, std::uint64_t expected_digest) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(path.string() + " is not a BMIP checkpoint");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint " + path.string() + " has format version " + std::to_string(version) +
                          ", this build reads " + std::to_string(kCheckpointVersion));
  }
  Checkpoint cp;
  cp.config_digest = get<std::uint64_t>(is, path);
  if (cp.config_digest != expected_digest) {
    throw CheckpointError("checkpoint " + path.string() + " was written for config " + digest_hex(cp.config_digest) +
                          ", expected " + digest_hex(expected_digest) + "; refusing to load");
  }
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("checkpoint " + path.string() + " is truncated");
    const auto rank = get<std::uint32_t>(is, path);
    if (rank == 0 || rank > kMaxRank) throw CheckpointError("checkpoint blob " + name + " has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is, path);
    std::vector<double> values(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw CheckpointError("checkpoint " + path.string() + " is truncated");
    }
    cp.blobs.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  return cp;
}

Checkpoint make_checkpoint(std::uint64_t config_digest, const Backbone& backbone, const PromptModel* model) {
  Checkpoint cp;
  cp.config_digest = config_digest;
  for (const auto& [name, t] : backbone.params.named_parameters()) cp.blobs.emplace_back("frozen/" + name, t);
  if (model) {
    for (const auto& nt : model->named_parameters()) cp.blobs.push_back(nt);
  }
  return cp;
}

Backbone restore_backbone(const Checkpoint& checkpoint, const BackboneConfig& config) {
  Backbone backbone = Backbone::initialize(config, 0);
  for (auto& [name, t] : backbone.params.named_parameters()) {
    const Tensor* stored = checkpoint.find("frozen/" + name);
    if (!stored) throw CheckpointError("checkpoint lacks frozen/" + name);
    Tensor target = t;
    copy_into(*stored, target, name);
  }
  backbone.params.set_requires_grad(false);
  return backbone;
}

void restore_prompts(const Checkpoint& checkpoint, PromptModel& model) {
  for (auto& [name, t] : model.named_parameters()) {
    const Tensor* stored = checkpoint.find(name);
    if (!stored) throw CheckpointError("checkpoint lacks " + name);
    Tensor target = t;
    copy_into(*stored, target, name);
  }
}

}  // namespace bmip
