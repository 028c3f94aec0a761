#include "fsda/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "fsda/image_io.hpp"

namespace fsda {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Support set construction

std::vector<int> SupportSet::unsaturated() const {
  std::vector<int> out;
  for (int c = 0; c < n_class; ++c) {
    if (occurrence[c] < k_shot) out.push_back(c);
  }
  return out;
}

std::vector<std::size_t> support_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x5u));
  rng.shuffle(order);
  return order;
}

SupportSet construct_support_set(const Dataset& dataset, int k_shot, int n_class, std::uint64_t seed) {
  if (k_shot < 1) throw std::invalid_argument("k_shot must be >= 1");
  if (n_class < 1) throw std::invalid_argument("n_class must be >= 1");
  if (dataset.empty()) throw std::invalid_argument("support pool is empty");

  SupportSet support;
  support.k_shot = k_shot;
  support.n_class = n_class;
  support.seed = seed;
  support.occurrence.assign(n_class, 0);

  for (std::size_t index : support_permutation(dataset.size(), seed)) {
    const LabeledSample& sample = dataset[index];
    validate_mask(sample.mask, n_class);
    bool admitted = false;
    for (int c : unique_labels(sample.mask)) {
      if (support.occurrence[c] < k_shot) {
        ++support.occurrence[c];
        admitted = true;
      }
    }
    if (admitted) {
      support.samples.push_back(sample);
      support.indices.push_back(index);
    }
  }
  if (support.samples.empty()) throw EmptySupport("support construction admitted no image");
  return support;
}

// ---------------------------------------------------------------------------
// Episode label remapping

RemappedLabels remap_episode_labels(const LabelMask& support_mask, const LabelMask& query_mask) {
  RemappedLabels out;
  out.class_set = unique_labels(support_mask);
  if (out.class_set.empty()) throw EmptySupport("support mask contains only ignored pixels");

  std::array<std::uint8_t, 256> lut;
  lut.fill(kIgnoreLabel);
  for (std::size_t i = 0; i < out.class_set.size(); ++i) {
    lut[out.class_set[i]] = static_cast<std::uint8_t>(i);
  }
  out.support = support_mask;
  for (auto& v : out.support.data) v = lut[v];
  out.query = query_mask;
  for (auto& v : out.query.data) v = lut[v];
  return out;
}

LabelMask restore_episode_labels(const LabelMask& remapped, const std::vector<int>& class_set) {
  LabelMask out = remapped;
  for (auto& v : out.data) {
    if (v == kIgnoreLabel) continue;
    if (v >= class_set.size()) throw Error("remapped label outside class set");
    v = static_cast<std::uint8_t>(class_set[v]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentParams draw_augment_params(Rng& rng, int height, int width, int crop_height, int crop_width) {
  AugmentParams p;
  p.scale = rng.uniform(0.9, 1.1);
  p.flip = rng.bernoulli(0.5);
  p.angle_deg = rng.uniform(-10.0, 10.0);
  const int scaled_h = static_cast<int>(std::lround(height * p.scale));
  const int scaled_w = static_cast<int>(std::lround(width * p.scale));
  auto offset = [&rng](int scaled, int crop) {
    if (scaled >= crop) return static_cast<int>(rng.uniform_index(scaled - crop + 1));
    return -static_cast<int>(rng.uniform_index(crop - scaled + 1));
  };
  p.offset_y = offset(scaled_h, crop_height);
  p.offset_x = offset(scaled_w, crop_width);
  return p;
}

LabeledSample apply_augment(const LabeledSample& sample, const AugmentParams& params, int crop_height,
                            int crop_width) {
  const ImageTensor& src = sample.image;
  const int h = src.height;
  const int w = src.width;
  const int c = src.channels;
  const int scaled_h = static_cast<int>(std::lround(h * params.scale));
  const int scaled_w = static_cast<int>(std::lround(w * params.scale));
  // Per-axis factor mapping scaled-frame pixel centres back to the source.
  const double sy = static_cast<double>(h) / scaled_h;
  const double sx = static_cast<double>(w) / scaled_w;
  const double cy = (scaled_h - 1) / 2.0;
  const double cx = (scaled_w - 1) / 2.0;
  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta);
  const double sin_t = std::sin(theta);

  LabeledSample out;
  out.name = sample.name;
  out.image = ImageTensor(crop_height, crop_width, c, 0.0);
  out.mask = LabelMask(crop_height, crop_width, kIgnoreLabel);

  for (int oy = 0; oy < crop_height; ++oy) {
    for (int ox = 0; ox < crop_width; ++ox) {
      // Crop origin -> scaled rotated frame -> unrotated -> unflipped -> source.
      const double py = oy + params.offset_y - cy;
      const double px = ox + params.offset_x - cx;
      double qy = cos_t * py - sin_t * px + cy;
      double qx = sin_t * py + cos_t * px + cx;
      if (params.flip) qx = (scaled_w - 1) - qx;
      const double ry = (qy + 0.5) * sy - 0.5;
      const double rx = (qx + 0.5) * sx - 0.5;
      if (ry < -0.5 || ry >= h - 0.5 || rx < -0.5 || rx >= w - 0.5) continue;

      const int ny = std::clamp(static_cast<int>(std::floor(ry + 0.5)), 0, h - 1);
      const int nx = std::clamp(static_cast<int>(std::floor(rx + 0.5)), 0, w - 1);
      out.mask.at(oy, ox) = sample.mask.at(ny, nx);

      const double cyc = std::clamp(ry, 0.0, h - 1.0);
      const double cxc = std::clamp(rx, 0.0, w - 1.0);
      const int y0 = static_cast<int>(std::floor(cyc));
      const int x0 = static_cast<int>(std::floor(cxc));
      const int y1 = std::min(y0 + 1, h - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double fy = cyc - y0;
      const double fx = cxc - x0;
      for (int k = 0; k < c; ++k) {
        double v = (1 - fy) * ((1 - fx) * src.at(y0, x0, k) + fx * src.at(y0, x1, k));
        if (fy != 0.0) v += fy * ((1 - fx) * src.at(y1, x0, k) + fx * src.at(y1, x1, k));
        out.image.at(oy, ox, k) = v;
      }
    }
  }
  return out;
}

LabeledSample augment(const LabeledSample& sample, int crop_height, int crop_width, Rng& rng) {
  const AugmentParams params =
      draw_augment_params(rng, sample.image.height, sample.image.width, crop_height, crop_width);
  return apply_augment(sample, params, crop_height, crop_width);
}

// ---------------------------------------------------------------------------
// Episodes

Episode make_episode(const LabeledSample& query, const SupportSet& support, const EpisodeOptions& options,
                     Rng& rng) {
  if (support.empty()) throw std::invalid_argument("support set is empty");
  LabeledSample support_sample;
  bool found = false;
  for (int attempt = 0; attempt < std::max(1, options.retry_budget); ++attempt) {
    const auto& drawn = support.samples[rng.uniform_index(support.size())];
    support_sample = options.augment ? augment(drawn, options.crop_height, options.crop_width, rng) : drawn;
    if (!unique_labels(support_sample.mask).empty()) {
      found = true;
      break;
    }
  }
  if (!found) {
    throw EmptySupport("no support draw with a valid pixel after " + std::to_string(options.retry_budget) +
                       " attempts");
  }
  LabeledSample query_sample =
      options.augment ? augment(query, options.crop_height, options.crop_width, rng) : query;

  RemappedLabels remapped = remap_episode_labels(support_sample.mask, query_sample.mask);
  Episode episode;
  episode.support = {std::move(support_sample.image), std::move(remapped.support), support_sample.name};
  episode.query = {std::move(query_sample.image), std::move(remapped.query), query_sample.name};
  episode.class_set = std::move(remapped.class_set);
  return episode;
}

Episode sample_episode(const Dataset& query_dataset, const SupportSet& support, const EpisodeOptions& options,
                       Rng& rng) {
  if (query_dataset.empty()) throw std::invalid_argument("query dataset is empty");
  const auto& query = query_dataset[rng.uniform_index(query_dataset.size())];
  return make_episode(query, support, options, rng);
}

EpisodeStream::EpisodeStream(const Dataset& query_dataset, const SupportSet& support, EpisodeOptions options,
                             std::uint64_t seed)
    : queries_(query_dataset), support_(support), options_(options), rng_(seed) {
  if (queries_.empty()) throw std::invalid_argument("query dataset is empty");
  if (support_.empty()) throw std::invalid_argument("support set is empty");
}

Episode EpisodeStream::next() {
  if (cursor_ == order_.size()) {
    order_.resize(queries_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_);
    cursor_ = 0;
  }
  return make_episode(queries_[order_[cursor_++]], support_, options_, rng_);
}

// ---------------------------------------------------------------------------
// Synthetic domains

namespace {

std::array<double, 3> hsv(double hue, double sat, double val) {
  const double h6 = std::fmod(hue, 1.0) * 6.0;
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = val * (1 - sat);
  const double q = val * (1 - sat * f);
  const double t = val * (1 - sat * (1 - f));
  switch (sector) {
    case 0: return {val, t, p};
    case 1: return {q, val, p};
    case 2: return {p, val, t};
    case 3: return {p, q, val};
    case 4: return {t, p, val};
    default: return {val, p, q};
  }
}

enum class ShapeKind { kRect, kEllipse, kBar, kTriangle };

struct ThingStyle {
  ShapeKind kind;
  double min_size;  // fraction of image height
  double max_size;
};

// Shape classes come in pairs that share a hue and differ in geometry.
ThingStyle thing_style(int thing_index) {
  static constexpr ThingStyle kStyles[] = {
      {ShapeKind::kRect, 0.08, 0.16},     {ShapeKind::kEllipse, 0.08, 0.16},
      {ShapeKind::kBar, 0.12, 0.25},      {ShapeKind::kTriangle, 0.08, 0.15},
      {ShapeKind::kEllipse, 0.05, 0.10},  {ShapeKind::kRect, 0.05, 0.10},
      {ShapeKind::kTriangle, 0.10, 0.18}, {ShapeKind::kBar, 0.08, 0.16},
  };
  return kStyles[thing_index % 8];
}

struct Instance {
  int class_id;
  ShapeKind kind;
  double cy, cx, half_h, half_w, angle;
  std::array<double, 3> color;
};

bool inside(const Instance& s, double y, double x) {
  const double dy = y - s.cy;
  const double dx = x - s.cx;
  switch (s.kind) {
    case ShapeKind::kRect:
      return std::abs(dy) <= s.half_h && std::abs(dx) <= s.half_w;
    case ShapeKind::kEllipse: {
      const double a = dy / s.half_h;
      const double b = dx / s.half_w;
      return a * a + b * b <= 1.0;
    }
    case ShapeKind::kBar: {
      // Thick segment of length 2*half_h along `angle` from vertical.
      const double uy = std::cos(s.angle);
      const double ux = std::sin(s.angle);
      const double along = std::clamp(dy * uy + dx * ux, -s.half_h, s.half_h);
      const double ey = dy - along * uy;
      const double ex = dx - along * ux;
      const double thickness = std::max(1.5, s.half_w * 0.35);
      return ey * ey + ex * ex <= thickness * thickness;
    }
    case ShapeKind::kTriangle: {
      if (dy < -s.half_h || dy > s.half_h) return false;
      const double frac = (dy + s.half_h) / (2.0 * s.half_h);
      return std::abs(dx) <= s.half_w * frac;
    }
  }
  return false;
}

std::vector<std::array<double, 3>> palette_from_hues(const std::vector<std::array<double, 3>>& hsv_list) {
  std::vector<std::array<double, 3>> palette;
  for (const auto& e : hsv_list) palette.push_back(hsv(e[0], e[1], e[2]));
  return palette;
}

double quantize(double v) { return std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

SyntheticDomainSpec default_source_spec() {
  SyntheticDomainSpec spec;
  spec.name = "source";
  spec.n_class = 12;
  spec.n_stuff = 4;
  spec.palette = palette_from_hues({
      {0.58, 0.55, 0.90}, {0.08, 0.45, 0.45}, {0.33, 0.60, 0.55}, {0.00, 0.00, 0.35},
      {0.00, 0.80, 0.85}, {0.00, 0.80, 0.75}, {0.15, 0.85, 0.90}, {0.15, 0.85, 0.80},
      {0.80, 0.60, 0.80}, {0.80, 0.60, 0.70}, {0.50, 0.75, 0.85}, {0.50, 0.75, 0.75},
  });
  spec.texture_noise_sigma = 0.05;
  spec.shape_density = {0, 0, 0, 0, 2.0, 1.5, 2.5, 1.0, 2.0, 1.5, 1.5, 1.0};
  spec.class_frequency = {1.0, 0.7, 0.6, 1.0, 0.6, 0.5, 0.5, 0.45, 0.4, 0.4, 0.35, 0.35};
  spec.seed = 1;
  return spec;
}

SyntheticDomainSpec default_target_spec() {
  SyntheticDomainSpec spec = default_source_spec();
  spec.name = "target";
  spec.palette = palette_from_hues({
      {0.08, 0.35, 0.95}, {0.62, 0.40, 0.40}, {0.85, 0.45, 0.55}, {0.33, 0.15, 0.45},
      {0.50, 0.70, 0.80}, {0.50, 0.70, 0.70}, {0.33, 0.80, 0.85}, {0.33, 0.80, 0.75},
      {0.00, 0.70, 0.80}, {0.00, 0.70, 0.70}, {0.15, 0.80, 0.85}, {0.15, 0.80, 0.75},
  });
  spec.texture_noise_sigma = 0.08;
  spec.seed = 2;
  return spec;
}

LabeledSample render_synthetic_image(const SyntheticDomainSpec& spec, std::size_t index) {
  if (static_cast<int>(spec.palette.size()) != spec.n_class) {
    throw std::invalid_argument("palette length does not match n_class");
  }
  if (static_cast<int>(spec.class_frequency.size()) != spec.n_class ||
      static_cast<int>(spec.shape_density.size()) != spec.n_class) {
    throw std::invalid_argument("per-class spec arrays must have n_class entries");
  }
  if (spec.n_stuff < 1 || spec.n_stuff > spec.n_class) throw std::invalid_argument("n_stuff out of range");

  Rng rng(derive_seed(spec.seed, index));
  const int h = spec.image_height;
  const int w = spec.image_width;
  LabelMask mask(h, w, kIgnoreLabel);

  // Stuff bands, top to bottom in class order.
  std::vector<int> bands;
  for (int c = 0; c < spec.n_stuff; ++c) {
    if (rng.bernoulli(spec.class_frequency[c])) bands.push_back(c);
  }
  if (bands.empty()) {
    const auto best = std::max_element(spec.class_frequency.begin(), spec.class_frequency.begin() + spec.n_stuff);
    bands.push_back(static_cast<int>(best - spec.class_frequency.begin()));
  }
  std::vector<double> cut(bands.size() + 1, 0.0);
  for (std::size_t i = 0; i < bands.size(); ++i) cut[i + 1] = cut[i] + rng.uniform(0.5, 1.5);
  std::vector<int> boundary(bands.size() + 1);
  for (std::size_t i = 0; i <= bands.size(); ++i) {
    boundary[i] = static_cast<int>(std::lround(cut[i] / cut.back() * h));
  }
  const double tilt = rng.uniform(-0.08, 0.08);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double ty = y + tilt * (x - w / 2.0);
      std::size_t band = 0;
      while (band + 1 < bands.size() && ty >= boundary[band + 1]) ++band;
      mask.at(y, x) = static_cast<std::uint8_t>(bands[band]);
    }
  }

  std::vector<Instance> instances;
  for (int c = spec.n_stuff; c < spec.n_class; ++c) {
    if (!rng.bernoulli(spec.class_frequency[c])) continue;
    const int count = std::max(1, rng.poisson(spec.shape_density[c]));
    const ThingStyle style = thing_style(c - spec.n_stuff);
    for (int i = 0; i < count; ++i) {
      Instance s;
      s.class_id = c;
      s.kind = style.kind;
      s.half_h = rng.uniform(style.min_size, style.max_size) * h;
      s.half_w = s.half_h * rng.uniform(0.6, 1.2);
      s.cy = rng.uniform(0.1, 0.95) * h;
      s.cx = rng.uniform(0.05, 0.95) * w;
      s.angle = rng.uniform(-0.3, 0.3);
      instances.push_back(s);
    }
  }
  rng.shuffle(instances);
  for (const Instance& s : instances) {
    const int y0 = std::max(0, static_cast<int>(s.cy - s.half_h - 2));
    const int y1 = std::min(h - 1, static_cast<int>(s.cy + s.half_h + 2));
    const int reach = static_cast<int>(std::max(s.half_w, s.half_h)) + 2;
    const int x0 = std::max(0, static_cast<int>(s.cx) - reach);
    const int x1 = std::min(w - 1, static_cast<int>(s.cx) + reach);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (inside(s, y, x)) mask.at(y, x) = static_cast<std::uint8_t>(s.class_id);
      }
    }
  }

  LabeledSample sample;
  sample.mask = std::move(mask);
  sample.image = ImageTensor(h, w, 3);
  const double sigma = spec.texture_noise_sigma;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto& color = spec.palette[sample.mask.at(y, x)];
      for (int k = 0; k < 3; ++k) {
        const double noise = sigma > 0.0 ? sigma * rng.normal() : 0.0;
        sample.image.at(y, x, k) = quantize(color[k] + noise);
      }
    }
  }
  char name[64];
  std::snprintf(name, sizeof(name), "%s_%05zu", spec.name.c_str(), index);
  sample.name = name;
  return sample;
}

Dataset generate_synthetic_domain(const SyntheticDomainSpec& spec, int n_images) {
  if (n_images < 1) throw std::invalid_argument("n_images must be >= 1");
  if (static_cast<int>(spec.palette.size()) != spec.n_class) {
    throw std::invalid_argument("palette length does not match n_class");
  }
  Dataset out;
  out.reserve(n_images);
  for (int i = 0; i < n_images; ++i) out.push_back(render_synthetic_image(spec, static_cast<std::size_t>(i)));
  return out;
}

void to_json(nlohmann::json& j, const SyntheticDomainSpec& spec) {
  j = nlohmann::json{{"name", spec.name},
                     {"n_class", spec.n_class},
                     {"n_stuff", spec.n_stuff},
                     {"image_size", {spec.image_height, spec.image_width}},
                     {"palette", spec.palette},
                     {"texture_noise_sigma", spec.texture_noise_sigma},
                     {"shape_density", spec.shape_density},
                     {"class_frequency", spec.class_frequency},
                     {"seed", spec.seed}};
}

void from_json(const nlohmann::json& j, SyntheticDomainSpec& spec) {
  SyntheticDomainSpec defaults = default_source_spec();
  spec.name = j.value("name", defaults.name);
  spec.n_class = j.value("n_class", defaults.n_class);
  spec.n_stuff = j.value("n_stuff", defaults.n_stuff);
  if (j.contains("image_size")) {
    spec.image_height = j.at("image_size").at(0).get<int>();
    spec.image_width = j.at("image_size").at(1).get<int>();
  }
  spec.palette = j.value("palette", defaults.palette);
  spec.texture_noise_sigma = j.value("texture_noise_sigma", defaults.texture_noise_sigma);
  spec.shape_density = j.value("shape_density", defaults.shape_density);
  spec.class_frequency = j.value("class_frequency", defaults.class_frequency);
  spec.seed = j.value("seed", defaults.seed);
}

// ---------------------------------------------------------------------------
// Manifests

void write_dataset(const std::string& directory, const Dataset& dataset, int n_class) {
  const fs::path root(directory);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  nlohmann::json manifest;
  manifest["format"] = "fsda-dataset";
  manifest["version"] = 1;
  manifest["n_class"] = n_class;
  manifest["samples"] = nlohmann::json::array();
  for (const auto& sample : dataset) {
    const std::string image_rel = "images/" + sample.name + ".png";
    const std::string mask_rel = "masks/" + sample.name + ".png";
    save_image((root / image_rel).string(), sample.image);
    save_mask((root / mask_rel).string(), sample.mask);
    manifest["samples"].push_back({{"image", image_rel}, {"mask", mask_rel}, {"name", sample.name}});
  }
  std::ofstream out(root / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw Error("failed to write manifest in " + directory);
}

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": " + e.what());
  }
}

LabeledSample load_entry(const fs::path& base, const nlohmann::json& entry, int n_class) {
  LabeledSample sample;
  sample.image = load_image((base / entry.at("image").get<std::string>()).string());
  sample.mask = load_mask((base / entry.at("mask").get<std::string>()).string(), n_class);
  sample.name = entry.at("name").get<std::string>();
  if (sample.image.height != sample.mask.height || sample.image.width != sample.mask.width) {
    throw Error(sample.name + ": image and mask sizes differ");
  }
  return sample;
}

}  // namespace

LoadedDataset load_dataset(const std::string& manifest_path) {
  const nlohmann::json manifest = read_json(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  LoadedDataset out;
  out.n_class = manifest.at("n_class").get<int>();
  for (const auto& entry : manifest.at("samples")) out.samples.push_back(load_entry(base, entry, out.n_class));
  return out;
}

void save_support_set(const std::string& path, const SupportSet& support, const std::string& dataset_manifest) {
  const nlohmann::json manifest = read_json(dataset_manifest);
  const fs::path support_dir = fs::absolute(path).parent_path();
  const fs::path dataset_dir = fs::absolute(dataset_manifest).parent_path();
  nlohmann::json out;
  out["format"] = "fsda-support";
  out["version"] = 1;
  out["n_class"] = support.n_class;
  out["k_shot"] = support.k_shot;
  out["seed"] = support.seed;
  out["occurrence"] = support.occurrence;
  out["unsaturated"] = support.unsaturated();
  out["dataset_manifest"] = fs::relative(fs::absolute(dataset_manifest), support_dir).string();
  out["samples"] = nlohmann::json::array();
  const auto& entries = manifest.at("samples");
  for (std::size_t index : support.indices) {
    const auto& entry = entries.at(index);
    out["samples"].push_back(
        {{"index", index},
         {"name", entry.at("name")},
         {"image", fs::relative(dataset_dir / entry.at("image").get<std::string>(), support_dir).string()},
         {"mask", fs::relative(dataset_dir / entry.at("mask").get<std::string>(), support_dir).string()}});
  }
  fs::create_directories(support_dir);
  std::ofstream file(path);
  file << out.dump(2) << '\n';
  if (!file) throw Error("failed to write " + path);
}

SupportSet load_support_set(const std::string& path) {
  const nlohmann::json in = read_json(path);
  if (in.value("format", "") != "fsda-support") throw Error(path + " is not a support manifest");
  const fs::path base = fs::path(path).parent_path();
  SupportSet support;
  support.n_class = in.at("n_class").get<int>();
  support.k_shot = in.at("k_shot").get<int>();
  support.seed = in.at("seed").get<std::uint64_t>();
  support.occurrence = in.at("occurrence").get<std::vector<int>>();
  for (const auto& entry : in.at("samples")) {
    support.samples.push_back(load_entry(base, entry, support.n_class));
    support.indices.push_back(entry.at("index").get<std::size_t>());
  }
  return support;
}

}  // namespace fsda
