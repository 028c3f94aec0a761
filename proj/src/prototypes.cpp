#include "fsda/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace fsda {

void PrototypeBank::insert(Prototype prototype) {
  if (static_cast<int>(prototype.vector.size()) != dim_) {
    throw std::invalid_argument("prototype dimension " + std::to_string(prototype.vector.size()) +
                                " does not match bank dimension " + std::to_string(dim_));
  }
  if (prototype.n_contributors < 1) throw std::invalid_argument("prototype needs at least one contributor");
  const int id = prototype.class_id;
  if (!entries_.emplace(id, std::move(prototype)).second) {
    throw std::invalid_argument("duplicate prototype for class " + std::to_string(id));
  }
}

std::vector<int> PrototypeBank::class_ids() const {
  std::vector<int> ids;
  for (const auto& [id, _] : entries_) ids.push_back(id);
  return ids;
}

std::vector<Prototype> PrototypeBank::prototypes() const {
  std::vector<Prototype> out;
  for (const auto& [_, p] : entries_) out.push_back(p);
  return out;
}

std::vector<double> masked_average_pool(const FeatureMap& features, const LabelMask& mask, int class_id) {
  const Tensor& x = features.values;
  if (mask.height != x.height || mask.width != x.width) {
    throw std::invalid_argument("mask does not match the feature map resolution");
  }
  std::vector<double> sum(x.channels, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.pixels(); ++i) {
    if (mask.data[i] != class_id) continue;
    const auto v = x.pixel(i);
    for (int k = 0; k < x.channels; ++k) sum[k] += v[k];
    ++count;
  }
  if (count == 0) throw ClassAbsent("class " + std::to_string(class_id) + " has no cell at feature resolution");
  for (double& s : sum) s /= static_cast<double>(count);
  return sum;
}

PrototypeExtraction extract_prototypes(const FeatureMap& features, const LabelMask& mask) {
  const std::vector<int> full = unique_labels(mask);
  if (full.empty()) throw EmptySupport("mask contains only ignored pixels");
  const LabelMask reduced = resize_nearest(mask, features.values.height, features.values.width);
  const std::vector<int> present = unique_labels(reduced);

  PrototypeExtraction out;
  for (int c : full) {
    if (std::binary_search(present.begin(), present.end(), c)) {
      out.prototypes.push_back({c, masked_average_pool(features, reduced, c), 1});
    } else {
      out.vanished.push_back(c);
    }
  }
  return out;
}

PrototypeBank aggregate_bank(const std::vector<std::vector<Prototype>>& per_image, std::string source) {
  int dim = -1;
  std::map<int, Prototype> sums;
  for (const auto& image : per_image) {
    std::vector<int> seen;
    for (const auto& p : image) {
      if (dim < 0) dim = static_cast<int>(p.vector.size());
      if (static_cast<int>(p.vector.size()) != dim) throw std::invalid_argument("prototype dimensions differ");
      if (std::find(seen.begin(), seen.end(), p.class_id) != seen.end()) {
        throw std::invalid_argument("class " + std::to_string(p.class_id) + " listed twice for one image");
      }
      seen.push_back(p.class_id);
      auto [it, inserted] = sums.try_emplace(p.class_id, Prototype{p.class_id, std::vector<double>(dim, 0.0), 0});
      for (int k = 0; k < dim; ++k) it->second.vector[k] += p.vector[k];
      ++it->second.n_contributors;
    }
  }
  if (sums.empty()) throw std::invalid_argument("cannot aggregate an empty prototype list");
  PrototypeBank bank(dim, std::move(source));
  for (auto& [_, p] : sums) {
    for (double& v : p.vector) v /= p.n_contributors;
    bank.insert(std::move(p));
  }
  return bank;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b, double epsilon) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::max(std::sqrt(na) * std::sqrt(nb), epsilon);
}

ScoreMap score_map(const FeatureMap& features, const std::vector<Prototype>& prototypes) {
  if (prototypes.empty()) throw std::invalid_argument("score_map needs at least one prototype");
  std::vector<const Prototype*> ordered;
  for (const auto& p : prototypes) {
    if (static_cast<int>(p.vector.size()) != features.dim()) {
      throw std::invalid_argument("prototype dimension " + std::to_string(p.vector.size()) +
                                  " does not match feature dimension " + std::to_string(features.dim()));
    }
    ordered.push_back(&p);
  }
  std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->class_id < b->class_id; });
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (ordered[i]->class_id == ordered[i - 1]->class_id) throw std::invalid_argument("duplicate prototype class");
  }

  const Tensor& x = features.values;
  const int n = static_cast<int>(ordered.size());
  ScoreMap out;
  out.data = Tensor(x.height, x.width, n);
  for (const auto* p : ordered) out.class_order.push_back(p->class_id);
  for (std::size_t i = 0; i < x.pixels(); ++i) {
    const auto v = x.pixel(i);
    auto s = out.data.pixel(i);
    for (int k = 0; k < n; ++k) s[k] = cosine_similarity(ordered[k]->vector, v);
  }
  return out;
}

ScoreMap score_map(const FeatureMap& features, const PrototypeBank& bank) {
  if (bank.dim() != features.dim()) {
    throw std::invalid_argument("bank dimension " + std::to_string(bank.dim()) + " does not match features " +
                                std::to_string(features.dim()));
  }
  return score_map(features, bank.prototypes());
}

ProbabilityMap prototype_softmax(const ScoreMap& scores, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  ProbabilityMap out{scores.data, scores.class_order};
  const int n = out.data.channels;
  for (std::size_t i = 0; i < out.data.pixels(); ++i) {
    auto p = out.data.pixel(i);
    double peak = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < n; ++k) peak = std::max(peak, temperature * p[k]);
    double total = 0.0;
    for (int k = 0; k < n; ++k) {
      p[k] = std::exp(temperature * p[k] - peak);
      total += p[k];
    }
    for (int k = 0; k < n; ++k) p[k] /= total;
  }
  return out;
}

LabelMask predict_labels(const ScoreMap& scores, int height, int width) {
  if (scores.class_order.empty()) throw std::invalid_argument("predict_labels: empty class order");
  const Tensor up = resize_bilinear(scores.data, height, width);
  LabelMask out(height, width);
  const int n = up.channels;
  for (std::size_t i = 0; i < up.pixels(); ++i) {
    const auto s = up.pixel(i);
    int best = 0;
    for (int k = 1; k < n; ++k) {
      if (s[k] > s[best]) best = k;
    }
    out.data[i] = static_cast<std::uint8_t>(scores.class_order[best]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bank files

namespace {

constexpr char kBankMagic[8] = {'F', 'S', 'D', 'A', 'B', 'A', 'N', 'K'};
constexpr std::uint32_t kBankVersion = 1;
constexpr std::size_t kDigestChars = 64;

template <typename T>
void put(std::string& out, const T& value) {
  out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(const std::string& bytes, std::size_t& pos, const std::string& path) {
  if (sizeof(T) > bytes.size() - pos) throw IntegrityError(path + ": unexpected end of bank file");
  T value;
  std::memcpy(&value, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

void save_bank(const std::string& path, const PrototypeBank& bank) {
  std::string out(kBankMagic, sizeof(kBankMagic));
  put(out, kBankVersion);
  put(out, static_cast<std::uint32_t>(bank.dim()));
  put(out, static_cast<std::uint32_t>(bank.source().size()));
  out += bank.source();
  put(out, static_cast<std::uint32_t>(bank.size()));
  for (const auto& [id, p] : bank.entries()) {
    put(out, static_cast<std::int32_t>(id));
    put(out, static_cast<std::int32_t>(p.n_contributors));
    out.append(reinterpret_cast<const char*>(p.vector.data()), sizeof(double) * p.vector.size());
  }
  out += sha256_hex(out);
  std::ofstream file(path, std::ios::binary);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw Error("failed to write bank " + path);
}

PrototypeBank load_bank(const std::string& path, int expected_dim) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open bank " + path);
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kBankMagic) + kDigestChars ||
      std::memcmp(bytes.data(), kBankMagic, sizeof(kBankMagic)) != 0) {
    throw IntegrityError(path + " is not a prototype bank");
  }
  const std::string body = bytes.substr(0, bytes.size() - kDigestChars);
  if (sha256_hex(body) != bytes.substr(bytes.size() - kDigestChars)) {
    throw IntegrityError(path + ": checksum mismatch (truncated or corrupt)");
  }
  std::size_t pos = sizeof(kBankMagic);
  const auto version = take<std::uint32_t>(body, pos, path);
  if (version != kBankVersion) throw IntegrityError(path + ": unsupported bank version " + std::to_string(version));
  const int dim = static_cast<int>(take<std::uint32_t>(body, pos, path));
  if (expected_dim > 0 && dim != expected_dim) {
    throw ConfigMismatch(path + ": bank dimension " + std::to_string(dim) + ", expected " +
                         std::to_string(expected_dim));
  }
  const auto source_size = take<std::uint32_t>(body, pos, path);
  if (source_size > body.size() - pos) throw IntegrityError(path + ": unexpected end of bank file");
  PrototypeBank bank(dim, body.substr(pos, source_size));
  pos += source_size;
  const auto count = take<std::uint32_t>(body, pos, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    Prototype p;
    p.class_id = take<std::int32_t>(body, pos, path);
    p.n_contributors = take<std::int32_t>(body, pos, path);
    p.vector.resize(dim);
    for (double& v : p.vector) v = take<double>(body, pos, path);
    bank.insert(std::move(p));
  }
  if (pos != body.size()) throw IntegrityError(path + ": trailing bytes");
  return bank;
}

}  // namespace fsda
