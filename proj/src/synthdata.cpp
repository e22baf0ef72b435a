#include "rfm/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace rfm::synth {

namespace {

constexpr double kPi = std::numbers::pi;

// Scene appearance constants.
constexpr double kLumLo = 0.35, kLumHi = 0.65;
constexpr double kLumTexture = 0.12;
constexpr double kBaseChroma = 0.06;
constexpr double kChromaTexture = 0.02;
constexpr double kSignatureChroma = 0.30;
constexpr int kMaxRetries = 64;
constexpr double kMinDecoyScale = 0.02;

// Reference appearance constants.
constexpr double kRefBackground = 0.05;
constexpr double kRefLum = 0.72;
constexpr double kRefLumTexture = 0.07;
constexpr double kRefChroma = 0.25;

// Orthonormal chroma basis (zero channel sum).
const std::array<double, 3> kE1{2.0 / std::sqrt(6.0), -1.0 / std::sqrt(6.0), -1.0 / std::sqrt(6.0)};
const std::array<double, 3> kE2{0.0, 1.0 / std::sqrt(2.0), -1.0 / std::sqrt(2.0)};

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

/// Lattice noise at the given cell sizes, smoothly interpolated, summed with
/// the given weights and normalized to zero mean and unit RMS.
std::vector<double> band_noise(int s, Rng& rng, const std::vector<std::pair<int, double>>& octaves) {
  std::vector<double> out(static_cast<std::size_t>(s * s), 0.0);
  for (const auto& [cell, weight] : octaves) {
    const int g = s / cell + 2;
    std::vector<double> lattice(static_cast<std::size_t>(g * g));
    for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
    const double ox = rng.uniform(0.0, 1.0), oy = rng.uniform(0.0, 1.0);
    for (int y = 0; y < s; ++y) {
      const double fy = (y + 0.5) / cell + oy;
      const int y0 = static_cast<int>(fy);
      const double ty = smooth(fy - y0);
      for (int x = 0; x < s; ++x) {
        const double fx = (x + 0.5) / cell + ox;
        const int x0 = static_cast<int>(fx);
        const double tx = smooth(fx - x0);
        auto at = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy * g + xx)]; };
        const double top = at(y0, x0) * (1 - tx) + at(y0, x0 + 1) * tx;
        const double bot = at(y0 + 1, x0) * (1 - tx) + at(y0 + 1, x0 + 1) * tx;
        out[static_cast<std::size_t>(y * s + x)] += weight * (top * (1 - ty) + bot * ty);
      }
    }
  }
  double mean = 0.0;
  for (double v : out) mean += v;
  mean /= static_cast<double>(out.size());
  double ss = 0.0;
  for (double& v : out) {
    v -= mean;
    ss += v * v;
  }
  const double rms = std::sqrt(ss / static_cast<double>(out.size()));
  if (rms > 0.0) {
    for (double& v : out) v /= rms;
  }
  return out;
}

/// Random texture family: octave weights drawn per scene, independent of the category.
std::vector<std::pair<int, double>> texture_family(Rng& rng) {
  return {{16, rng.uniform(0.3, 1.0)}, {8, rng.uniform(0.3, 1.0)}, {4, rng.uniform(0.1, 0.6)}};
}

struct Blob {
  double cx = 0, cy = 0, radius = 0;
  int lobes = 2;
  double lobe_amp = 0, lobe_phase = 0;
  std::array<double, 2> harm_amp{}, harm_phase{};  // 2nd and 3rd harmonics of the outline
  double rotation = 0;

  double r(double theta) const {
    return radius * (1.0 + lobe_amp * std::cos(lobes * theta + lobe_phase) +
                     harm_amp[0] * std::cos(2.0 * theta + harm_phase[0]) +
                     harm_amp[1] * std::cos(3.0 * theta + harm_phase[1]));
  }
  double max_radius() const { return radius * (1.0 + lobe_amp + harm_amp[0] + harm_amp[1]); }
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double d = std::hypot(dx, dy);
    if (d == 0.0) return true;
    return d <= r(std::atan2(dy, dx) - rotation);
  }
};

/// Shape of the category family with nominal area `area` (in pixels), centred at the origin.
Blob sample_blob(const CategorySignature& sig, double area, Rng& rng) {
  Blob b;
  b.lobes = sig.lobes;
  b.lobe_amp = sig.lobe_amp * rng.uniform(0.8, 1.2);
  b.lobe_phase = rng.uniform(0.0, 2.0 * kPi);
  for (std::size_t i = 0; i < 2; ++i) {
    b.harm_amp[i] = rng.uniform(0.0, 0.06);
    b.harm_phase[i] = rng.uniform(0.0, 2.0 * kPi);
  }
  b.rotation = rng.uniform(0.0, 2.0 * kPi);
  // Area of the polar outline: pi R^2 (1 + sum a_i^2 / 2).
  const double spread = 1.0 + 0.5 * (b.lobe_amp * b.lobe_amp + b.harm_amp[0] * b.harm_amp[0] +
                                     b.harm_amp[1] * b.harm_amp[1]);
  b.radius = std::sqrt(area / (kPi * spread));
  return b;
}

Tensor rasterize(const Blob& b, int s) {
  Tensor m({1, s, s});
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) m[static_cast<std::size_t>(y * s + x)] = b.contains(x + 0.5, y + 0.5) ? 1.0 : 0.0;
  }
  return m;
}

double area_of(const Tensor& m) { return m.sum() / static_cast<double>(m.numel()); }

Tensor dilate(const Tensor& m, int s, int radius) {
  Tensor out({1, s, s});
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      if (m[static_cast<std::size_t>(y * s + x)] == 0.0) continue;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < s && xx >= 0 && xx < s) out[static_cast<std::size_t>(yy * s + xx)] = 1.0;
        }
      }
    }
  }
  return out;
}

void put_rgb(Tensor& img, int s, int y, int x, double lum, double a, double b) {
  for (int c = 0; c < 3; ++c) {
    const double v = lum + a * kE1[static_cast<std::size_t>(c)] + b * kE2[static_cast<std::size_t>(c)];
    img[static_cast<std::size_t>((c * s + y) * s + x)] = std::clamp(v, 0.0, 1.0);
  }
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

CategorySignature category_signature(int category, int num_categories) {
  if (num_categories < 1 || category < 0 || category >= num_categories) {
    throw std::invalid_argument("category " + std::to_string(category) + " out of range for " +
                                std::to_string(num_categories) + " categories");
  }
  CategorySignature sig;
  sig.hue = 2.0 * kPi * category / num_categories;
  sig.lobes = 2 + category % 4;
  sig.lobe_amp = 0.10 + 0.04 * ((category / 4) % 2);
  return sig;
}

std::array<double, 3> chroma_direction(double hue) {
  std::array<double, 3> u{};
  for (std::size_t c = 0; c < 3; ++c) u[c] = std::cos(hue) * kE1[c] + std::sin(hue) * kE2[c];
  return u;
}

Scene gen_scene(const SceneSpec& spec) {
  const int s = spec.image_size;
  if (s < 16) throw std::invalid_argument("gen_scene: image size must be at least 16");
  if (spec.scale < 0.1 || spec.scale > 0.4) throw std::invalid_argument("gen_scene: scale must lie in [0.1, 0.4]");
  if (spec.camouflage_strength < 0.0 || spec.camouflage_strength > 1.0) {
    throw std::invalid_argument("gen_scene: camouflage strength must lie in [0, 1]");
  }
  const CategorySignature sig = category_signature(spec.category_id, spec.num_categories);
  const double pixels = static_cast<double>(s) * s;

  for (int retry = 0; retry < kMaxRetries; ++retry) {
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(retry), 0x5CE));
    // Geometry.
    Blob target = sample_blob(sig, spec.scale * pixels, rng);
    const double margin = target.max_radius() + 1.0;
    if (2.0 * margin >= s) continue;
    target.cx = rng.uniform(margin, s - margin);
    target.cy = rng.uniform(margin, s - margin);
    Scene scene;
    scene.mask = rasterize(target, s);
    scene.area_fraction = area_of(scene.mask);
    scene.retries = retry;
    if (scene.area_fraction < 0.02 || scene.area_fraction > 0.5) continue;

    Tensor decoy_mask;
    if (spec.decoy && spec.num_categories >= 4) {
      // Another category at least a quarter turn away in hue.
      const int n = spec.num_categories;
      const int lo = (n + 3) / 4, hi = n - lo;
      const int offset = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
      const int dc = (spec.category_id + offset) % n;
      const CategorySignature dsig = category_signature(dc, n);
      double dscale = std::clamp(spec.scale * rng.uniform(0.75, 1.25), 0.1, 0.4);
      Blob decoy = sample_blob(dsig, dscale * pixels, rng);
      const Tensor keep_out = dilate(scene.mask, s, 2);
      bool placed = false;
      // Large targets leave no room for an equal-sized decoy: shrink it.
      while (!placed && dscale >= kMinDecoyScale) {
        for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
          decoy.cx = rng.uniform(0.0, s);
          decoy.cy = rng.uniform(0.0, s);
          Tensor m = rasterize(decoy, s);
          if (m.sum() < 0.5 * dscale * pixels) continue;
          bool overlap = false;
          for (std::size_t i = 0; i < m.numel() && !overlap; ++i) overlap = m[i] > 0.0 && keep_out[i] > 0.0;
          if (overlap) continue;
          decoy_mask = std::move(m);
          placed = true;
        }
        if (!placed) {
          dscale *= 0.7;
          decoy.radius *= std::sqrt(0.7);
        }
      }
      if (!placed) continue;
      scene.decoy_category = dc;
    }

    // Appearance.
    const double lum0 = rng.uniform(kLumLo, kLumHi);
    const double base_angle = rng.uniform(0.0, 2.0 * kPi);
    const double base_mag = rng.uniform(0.0, kBaseChroma);
    const double a0 = base_mag * std::cos(base_angle), b0 = base_mag * std::sin(base_angle);
    const auto family = texture_family(rng);
    const auto bg_lum = band_noise(s, rng, family);
    const auto obj_lum = band_noise(s, rng, family);
    const auto decoy_lum = band_noise(s, rng, family);
    const auto bg_a = band_noise(s, rng, family);
    const auto bg_b = band_noise(s, rng, family);
    const double mix = 1.0 - spec.camouflage_strength;
    const double ta = kSignatureChroma * std::cos(sig.hue), tb = kSignatureChroma * std::sin(sig.hue);
    double da = 0.0, db = 0.0;
    if (scene.decoy_category >= 0) {
      const double dh = category_signature(scene.decoy_category, spec.num_categories).hue;
      da = kSignatureChroma * std::cos(dh);
      db = kSignatureChroma * std::sin(dh);
    }

    scene.image = Tensor({3, s, s});
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const auto i = static_cast<std::size_t>(y * s + x);
        double lum = lum0 + kLumTexture * bg_lum[i];
        double a = a0 + kChromaTexture * bg_a[i];
        double b = b0 + kChromaTexture * bg_b[i];
        // Object texture: own luminance pattern, chroma shifted along the signature.
        if (scene.mask[i] > 0.0) {
          lum = (1.0 - mix) * lum + mix * (lum0 + kLumTexture * obj_lum[i]);
          a += mix * ta;
          b += mix * tb;
        } else if (!decoy_mask.empty() && decoy_mask[i] > 0.0) {
          lum = (1.0 - mix) * lum + mix * (lum0 + kLumTexture * decoy_lum[i]);
          a += mix * da;
          b += mix * db;
        }
        put_rgb(scene.image, s, y, x, lum, a, b);
      }
    }
    return scene;
  }
  throw std::runtime_error("gen_scene: no valid layout after " + std::to_string(kMaxRetries) + " retries");
}

Reference gen_reference(const ReferenceSpec& spec) {
  const int s = spec.image_size;
  if (s < 16) throw std::invalid_argument("gen_reference: image size must be at least 16");
  const CategorySignature sig = category_signature(spec.category_id, spec.num_categories);
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(spec.category_id), 0x8EF));
  Blob blob = sample_blob(sig, rng.uniform(0.12, 0.3) * s * s, rng);
  const double margin = std::min(blob.max_radius() + 1.0, 0.5 * s);
  const double jitter = std::max(0.0, std::min(4.0, 0.5 * s - margin));
  blob.cx = 0.5 * s + rng.uniform(-jitter, jitter);
  blob.cy = 0.5 * s + rng.uniform(-jitter, jitter);

  Reference ref;
  ref.mask = rasterize(blob, s);
  ref.area_fraction = area_of(ref.mask);
  const auto lum = band_noise(s, rng, texture_family(rng));
  const double a = kRefChroma * std::cos(sig.hue), b = kRefChroma * std::sin(sig.hue);
  ref.image = Tensor({3, s, s}, kRefBackground);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const auto i = static_cast<std::size_t>(y * s + x);
      if (ref.mask[i] == 0.0) continue;
      put_rgb(ref.image, s, y, x, kRefLum + kRefLumTexture * std::clamp(lum[i] / 3.0, -1.0, 1.0), a, b);
    }
  }
  return ref;
}

Tensor gen_text_embedding(int category_id, int n_sentences, std::uint64_t seed, double jitter) {
  if (n_sentences < 1) throw std::invalid_argument("gen_text_embedding: need at least one sentence");
  if (category_id < 0) throw std::invalid_argument("gen_text_embedding: negative category");
  auto normalize = [](std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
  };
  Rng anchor_rng(mix_seed(0x7E47, static_cast<std::uint64_t>(category_id)));
  std::vector<double> anchor(kTextDim);
  for (double& v : anchor) v = anchor_rng.normal();
  normalize(anchor);

  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(category_id), 0x7E48));
  const double sigma = jitter / std::sqrt(static_cast<double>(kTextDim));
  Tensor out({n_sentences, kTextDim});
  std::vector<double> row(kTextDim);
  for (int n = 0; n < n_sentences; ++n) {
    for (int j = 0; j < kTextDim; ++j) row[static_cast<std::size_t>(j)] = anchor[static_cast<std::size_t>(j)] + sigma * rng.normal();
    normalize(row);
    std::copy(row.begin(), row.end(), out.ptr() + static_cast<std::ptrdiff_t>(n) * kTextDim);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_pgm(const std::string& path, const Tensor& image) {
  const Shape& sh = image.shape();
  if (sh.size() != 3) throw std::invalid_argument("write_pgm: expected [C,H,W], got " + shape_str(sh));
  const std::int64_t h = sh[0] * sh[1], w = sh[2];
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<char> bytes(image.numel());
  for (std::size_t i = 0; i < image.numel(); ++i) bytes[i] = static_cast<char>(quantize(image[i]));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write_pgm: write failed for " + path);
}

Tensor read_pgm(const std::string& path, int channels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pgm: cannot open " + path);
  auto token = [&]() {
    std::string t;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t.push_back(c);
        break;
      }
    }
    while (is.get(c) && !std::isspace(static_cast<unsigned char>(c))) t.push_back(c);
    return t;
  };
  if (token() != "P5") throw std::runtime_error("read_pgm: " + path + " is not a binary PGM");
  const long w = std::stol(token()), h = std::stol(token()), maxv = std::stol(token());
  if (maxv != 255) throw std::runtime_error("read_pgm: " + path + ": only 8-bit PGM supported");
  if (channels < 1 || h % channels != 0) {
    throw std::runtime_error("read_pgm: " + path + ": height " + std::to_string(h) + " not divisible into " +
                             std::to_string(channels) + " planes");
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h));
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) throw std::runtime_error("read_pgm: " + path + " truncated");
  Tensor t({channels, h / channels, w});
  for (std::size_t i = 0; i < bytes.size(); ++i) t[i] = bytes[i] / 255.0;
  return t;
}

std::vector<ManifestRow> gen_dataset(const std::string& root, const DatasetSpec& spec) {
  if (spec.categories < 1 || spec.train_per_category < 0 || spec.test_per_category < 0 ||
      spec.refs_per_category < 1 || spec.sentences < 1) {
    throw std::invalid_argument("gen_dataset: counts must be positive");
  }
  if (fs::exists(root) && !(fs::is_directory(root) && fs::is_empty(root))) {
    throw std::runtime_error("gen_dataset: target " + root + " exists and is not empty");
  }
  std::vector<ManifestRow> rows;
  const std::array<std::pair<const char*, int>, 2> splits{{{"train", spec.train_per_category},
                                                          {"test", spec.test_per_category}}};
  for (std::size_t si = 0; si < splits.size(); ++si) {
    const std::string split = splits[si].first;
    for (const char* sub : {"images", "masks", "refs", "text"}) fs::create_directories(fs::path(root) / split / sub);
    const std::uint64_t split_key = 0x5000 + si;

    for (int c = 0; c < spec.categories; ++c) {
      for (int j = 0; j < spec.refs_per_category; ++j) {
        ReferenceSpec rs{c, spec.categories, mix_seed(spec.seed, split_key + 0x100, static_cast<std::uint64_t>(c * 1000 + j)),
                         spec.image_size};
        Reference ref = gen_reference(rs);
        char name[64];
        std::snprintf(name, sizeof name, "refs/c%d_r%d.pgm", c, j);
        write_pgm((fs::path(root) / split / name).string(), ref.image);
        rows.push_back({split + "/" + name, c, rs.seed, 0.0, ref.area_fraction});
      }
    }
    for (int c = 0; c < spec.categories; ++c) {
      for (int j = 0; j < splits[si].second; ++j) {
        const std::uint64_t seed = mix_seed(spec.seed, split_key, static_cast<std::uint64_t>(c * 100000 + j));
        Rng pick(mix_seed(seed, 0x5CA1E));
        SceneSpec ss;
        ss.category_id = c;
        ss.num_categories = spec.categories;
        ss.seed = seed;
        ss.scale = pick.uniform(0.1, 0.2);
        ss.camouflage_strength = spec.strength;
        ss.image_size = spec.image_size;
        ss.decoy = spec.decoys;
        Scene scene = gen_scene(ss);
        char stem[64];
        std::snprintf(stem, sizeof stem, "c%d_%03d", c, j);
        const std::string img = split + "/images/" + stem + ".pgm";
        const std::string msk = split + "/masks/" + stem + ".pgm";
        const std::string txt = split + "/text/" + stem + ".rfmt";
        write_pgm((fs::path(root) / img).string(), scene.image);
        write_pgm((fs::path(root) / msk).string(), scene.mask);
        save_tensor((fs::path(root) / txt).string(), gen_text_embedding(c, spec.sentences, seed));
        rows.push_back({img, c, seed, spec.strength, scene.area_fraction});
        rows.push_back({msk, c, seed, spec.strength, scene.area_fraction});
        rows.push_back({txt, c, seed, spec.strength, scene.area_fraction});
      }
    }
  }
  const std::string manifest = (fs::path(root) / "manifest.tsv").string();
  const std::string tmp = manifest + ".tmp";
  {
    std::ofstream os(tmp);
    os << "path\tcategory\tseed\tstrength\tarea_fraction\n";
    for (const auto& r : rows) {
      os << r.path << '\t' << r.category << '\t' << r.seed << '\t' << format_double(r.strength) << '\t'
         << format_double(r.area_fraction) << '\n';
    }
    if (!os) throw std::runtime_error("gen_dataset: failed writing " + tmp);
  }
  fs::rename(tmp, manifest);
  return rows;
}

Split load_split(const std::string& root, const std::string& split) {
  const fs::path manifest = fs::path(root) / "manifest.tsv";
  std::ifstream is(manifest);
  if (!is) throw std::runtime_error("load_split: missing " + manifest.string());
  std::string line;
  std::getline(is, line);
  Split out;
  const std::string image_prefix = split + "/images/";
  const std::string ref_prefix = split + "/refs/";
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string path, cat;
    std::getline(ls, path, '\t');
    std::getline(ls, cat, '\t');
    const int category = std::stoi(cat);
    if (path.rfind(image_prefix, 0) == 0) {
      const std::string stem = path.substr(image_prefix.size(), path.size() - image_prefix.size() - 4);
      out.names.push_back(stem);
      out.categories.push_back(category);
      out.images.push_back(read_pgm((fs::path(root) / path).string(), 3));
      Tensor m = read_pgm((fs::path(root) / split / "masks" / (stem + ".pgm")).string(), 1);
      for (auto& v : m.storage()) v = v > 0.5 ? 1.0 : 0.0;
      out.masks.push_back(std::move(m));
      out.text.push_back(load_tensor((fs::path(root) / split / "text" / (stem + ".rfmt")).string()));
    } else if (path.rfind(ref_prefix, 0) == 0) {
      out.refs[category].push_back(read_pgm((fs::path(root) / path).string(), 3));
    }
  }
  if (out.images.empty()) throw std::runtime_error("load_split: split '" + split + "' is empty in " + root);
  return out;
}

}  // namespace rfm::synth
