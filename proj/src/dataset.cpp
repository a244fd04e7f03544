#include "icre/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace icre {

const char* to_string(Modality m) { return m == Modality::VIS ? "VIS" : "IR"; }
const char* to_string(Split s) {
  switch (s) {
    case Split::TRAIN: return "TRAIN";
    case Split::QUERY: return "QUERY";
    default: return "GALLERY";
  }
}

Modality modality_from_string(const std::string& s) {
  if (s == "VIS") return Modality::VIS;
  if (s == "IR") return Modality::IR;
  throw std::runtime_error("unknown modality token: '" + s + "'");
}

int64_t Manifest::num_vis() const {
  return std::count_if(records.begin(), records.end(),
                       [](const SampleRecord& r) { return r.modality == Modality::VIS; });
}
int64_t Manifest::num_ir() const { return static_cast<int64_t>(records.size()) - num_vis(); }

int Manifest::num_identities() const {
  int mx = -1;
  for (const auto& r : records) mx = std::max(mx, r.identity);
  return mx + 1;
}

std::string Manifest::full_path(const SampleRecord& r) const {
  fs::path p(r.image_path);
  if (p.is_absolute() || root.empty()) return r.image_path;
  return (fs::path(root) / p).string();
}

Manifest load_manifest(const std::string& csv_path, Split split) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + csv_path);
  Manifest m;
  m.root = fs::path(csv_path).parent_path().string();
  m.split = split;

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_manifest: empty file " + csv_path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,identity,modality,camera")
    throw std::runtime_error("load_manifest: bad header '" + line + "'");

  std::vector<int> raw_ids;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string path, id_s, mod_s, cam_s;
    if (!std::getline(ss, path, ',') || !std::getline(ss, id_s, ',') ||
        !std::getline(ss, mod_s, ',') || !std::getline(ss, cam_s))
      throw std::runtime_error("load_manifest: malformed row " + std::to_string(lineno));
    SampleRecord r;
    r.image_path = path;
    try {
      raw_ids.push_back(std::stoi(id_s));
      r.camera = std::stoi(cam_s);
    } catch (const std::exception&) {
      throw std::runtime_error("load_manifest: malformed row " + std::to_string(lineno));
    }
    if (r.camera < 0)
      throw std::runtime_error("load_manifest: negative camera id, row " + std::to_string(lineno));
    r.modality = modality_from_string(mod_s);
    m.records.push_back(std::move(r));
  }

  // re-index identities to contiguous 0..P-1, keeping the mapping table
  std::set<int> uniq(raw_ids.begin(), raw_ids.end());
  std::map<int, int> to_new;
  for (int raw : uniq) {
    to_new[raw] = static_cast<int>(m.original_ids.size());
    m.original_ids.push_back(raw);
  }
  for (size_t i = 0; i < m.records.size(); ++i) m.records[i].identity = to_new[raw_ids[i]];

  if (split == Split::TRAIN) {
    std::map<int, std::array<int, 2>> counts;
    for (const auto& r : m.records) counts[r.identity][static_cast<size_t>(r.modality)]++;
    for (const auto& [id, c] : counts)
      if (c[0] == 0 || c[1] == 0)
        m.warnings.push_back("identity " + std::to_string(m.original_ids[static_cast<size_t>(id)]) +
                             " has no " + (c[0] == 0 ? "VIS" : "IR") + " records");
  }
  return m;
}

void save_manifest(const Manifest& m, const std::string& csv_path) {
  std::ofstream out(csv_path, std::ios::binary);  // binary keeps LF endings everywhere
  if (!out) throw std::runtime_error("save_manifest: cannot write " + csv_path);
  out << "path,identity,modality,camera\n";
  for (const auto& r : m.records)
    out << r.image_path << ',' << r.identity << ',' << to_string(r.modality) << ',' << r.camera
        << '\n';
}

Manifest filter_modality(const Manifest& m, Modality mod, Split split) {
  Manifest out;
  out.root = m.root;
  out.split = split;
  out.original_ids = m.original_ids;
  for (const auto& r : m.records)
    if (r.modality == mod) out.records.push_back(r);
  return out;
}

// ------------------------------------------------------------- synthetic data

namespace {

struct Canvas {
  int h, w;
  std::vector<double> px;  // RGB, [0,1]
  Canvas(int hh, int ww) : h(hh), w(ww), px(static_cast<size_t>(hh) * ww * 3, 0.0) {}
  void set(int y, int x, double r, double g, double b) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    double* p = px.data() + (static_cast<size_t>(y) * w + x) * 3;
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
};

void fill_rect(Canvas& c, double y0, double x0, double y1, double x1, double r, double g,
               double b) {
  for (int y = static_cast<int>(std::lround(y0)); y < static_cast<int>(std::lround(y1)); ++y)
    for (int x = static_cast<int>(std::lround(x0)); x < static_cast<int>(std::lround(x1)); ++x)
      c.set(y, x, r, g, b);
}

void fill_circle(Canvas& c, double cy, double cx, double rad, double r, double g, double b) {
  for (int y = static_cast<int>(cy - rad) - 1; y <= static_cast<int>(cy + rad) + 1; ++y)
    for (int x = static_cast<int>(cx - rad) - 1; x <= static_cast<int>(cx + rad) + 1; ++x)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= rad * rad) c.set(y, x, r, g, b);
}

struct Rgb {
  double r, g, b;
};

/// Deterministic per-identity appearance: body geometry is shared between
/// modalities (the recoverable identity signal), colors are VIS-specific and
/// intensities IR-specific (the modality-specific attributes).
struct IdentitySignature {
  double head_r, torso_w, torso_top, torso_bot, leg_len, leg_w, leg_gap;
  int n_stripes;
  double stripe_pos[3];
  double badge_x, badge_y, badge_s;
  Rgb torso_c, leg_c, badge_c;         // visible style
  double torso_i, leg_i, head_i, badge_i;  // infrared style

  static IdentitySignature make(uint64_t seed, int id) {
    Rng r(Rng::mix(seed, 0x51D00 + static_cast<uint64_t>(id)));
    IdentitySignature s;
    s.head_r = 0.05 + 0.05 * r.uniform();
    s.torso_w = 0.34 + 0.36 * r.uniform();
    s.torso_top = 0.20 + 0.05 * r.uniform();
    s.torso_bot = 0.50 + 0.10 * r.uniform();
    s.leg_len = 0.86 + 0.08 * r.uniform();
    s.leg_w = 0.10 + 0.08 * r.uniform();
    s.leg_gap = 0.04 + 0.10 * r.uniform();
    s.n_stripes = static_cast<int>(r.uniform_int(4));
    for (double& p : s.stripe_pos) p = r.uniform();
    s.badge_x = r.uniform();
    s.badge_y = r.uniform();
    s.badge_s = 0.10 + 0.08 * r.uniform();
    auto color = [&r] { return Rgb{0.15 + 0.8 * r.uniform(), 0.15 + 0.8 * r.uniform(),
                                    0.15 + 0.8 * r.uniform()}; };
    s.torso_c = color();
    s.leg_c = color();
    s.badge_c = color();
    s.torso_i = 0.35 + 0.45 * r.uniform();
    s.leg_i = 0.30 + 0.45 * r.uniform();
    s.head_i = 0.60 + 0.30 * r.uniform();
    s.badge_i = 0.80 + 0.15 * r.uniform();
    return s;
  }
};

img::Image8 render(const IdentitySignature& s, Modality mod, int h, int w, Rng& rng) {
  Canvas c(h, w);
  // nuisance: translation, scale, brightness, noise
  double dx = rng.uniform(-0.08, 0.08) * w;
  double dy = rng.uniform(-0.05, 0.05) * h;
  double sc = rng.uniform(0.92, 1.08);
  double bright = rng.uniform(0.85, 1.15);
  double ir_shift = rng.uniform(-0.08, 0.08);

  auto X = [&](double fx) { return (fx - 0.5) * sc * w + 0.5 * w + dx; };
  auto Y = [&](double fy) { return (fy - 0.5) * sc * h + 0.5 * h + dy; };
  bool vis = mod == Modality::VIS;

  // background
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      vis ? c.set(y, x, 0.08, 0.09, 0.12) : c.set(y, x, 0.06, 0.06, 0.06);

  double cx = 0.5;
  // legs
  double lg = s.leg_gap / 2.0, lw = s.leg_w;
  Rgb lc = vis ? s.leg_c : Rgb{s.leg_i, s.leg_i, s.leg_i};
  fill_rect(c, Y(s.torso_bot), X(cx - lg - lw), Y(s.leg_len), X(cx - lg), lc.r, lc.g, lc.b);
  fill_rect(c, Y(s.torso_bot), X(cx + lg), Y(s.leg_len), X(cx + lg + lw), lc.r, lc.g, lc.b);
  // torso
  Rgb tc = vis ? s.torso_c : Rgb{s.torso_i, s.torso_i, s.torso_i};
  fill_rect(c, Y(s.torso_top), X(cx - s.torso_w / 2), Y(s.torso_bot), X(cx + s.torso_w / 2), tc.r,
            tc.g, tc.b);
  // stripes
  for (int i = 0; i < s.n_stripes; ++i) {
    double fy = s.torso_top + s.stripe_pos[i] * (s.torso_bot - s.torso_top - 0.04);
    fill_rect(c, Y(fy), X(cx - s.torso_w / 2), Y(fy + 0.03), X(cx + s.torso_w / 2), tc.r * 0.35,
              tc.g * 0.35, tc.b * 0.35);
  }
  // badge inside torso
  {
    double bx = cx - s.torso_w / 2 + s.badge_x * (s.torso_w - s.badge_s);
    double by = s.torso_top + s.badge_y * (s.torso_bot - s.torso_top - s.badge_s * 0.6);
    Rgb bc = vis ? s.badge_c : Rgb{s.badge_i, s.badge_i, s.badge_i};
    fill_rect(c, Y(by), X(bx), Y(by + s.badge_s * 0.6), X(bx + s.badge_s), bc.r, bc.g, bc.b);
  }
  // head
  {
    Rgb hc = vis ? Rgb{0.85, 0.70, 0.55} : Rgb{s.head_i, s.head_i, s.head_i};
    fill_circle(c, Y(s.torso_top - s.head_r - 0.02), X(cx), s.head_r * sc * h, hc.r, hc.g, hc.b);
  }

  img::Image8 out;
  out.width = w;
  out.height = h;
  out.rgb.resize(static_cast<size_t>(h) * w * 3);
  for (size_t i = 0; i < c.px.size(); ++i) {
    double v = c.px[i];
    v = vis ? v * bright : v + ir_shift;
    v += rng.normal(0.0, 0.02);
    out.rgb[i] = static_cast<uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  }
  if (!vis) {
    // force exact grayscale after noise
    for (int i = 0; i < h * w; ++i) {
      uint8_t g = out.rgb[static_cast<size_t>(i) * 3];
      out.rgb[static_cast<size_t>(i) * 3 + 1] = g;
      out.rgb[static_cast<size_t>(i) * 3 + 2] = g;
    }
  }
  return out;
}

std::string img_name(Modality mod, int id, int k) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "images/%s_%03d_%03d.png", mod == Modality::VIS ? "v" : "i", id,
                k);
  return buf;
}

}  // namespace

Manifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  if (spec.num_ids < 2 || spec.imgs_per_id_per_modality < 2)
    throw std::invalid_argument("generate_synthetic: need >= 2 ids and >= 2 images per modality");
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw std::runtime_error("generate_synthetic: unwritable out_dir " + out_dir);

  Manifest m;
  m.root = out_dir;
  m.split = Split::TRAIN;
  Rng img_rng(Rng::mix(spec.seed, 0x1000 + spec.variation_tag));

  for (int id = 0; id < spec.num_ids; ++id) {
    IdentitySignature sig = IdentitySignature::make(spec.seed, id);
    for (Modality mod : {Modality::VIS, Modality::IR}) {
      for (int k = 0; k < spec.imgs_per_id_per_modality; ++k) {
        img::Image8 im = render(sig, mod, spec.height, spec.width, img_rng);
        std::string rel = img_name(mod, id, k);
        img::write_png((fs::path(out_dir) / rel).string(), im);
        SampleRecord r;
        r.image_path = rel;
        r.identity = id;
        r.modality = mod;
        r.camera = (mod == Modality::VIS ? 0 : 2) + (k % 2);
        m.records.push_back(std::move(r));
      }
    }
    m.original_ids.push_back(id);
  }
  save_manifest(m, (fs::path(out_dir) / "manifest.csv").string());
  return m;
}

// ------------------------------------------------------------------- sampling

std::vector<int64_t> sample_pk_indices(const Manifest& m, const SamplerConfig& cfg, Rng& rng) {
  if (m.split != Split::TRAIN) throw std::invalid_argument("sample_pk_batch: TRAIN manifest required");
  if (cfg.p < 2) throw std::invalid_argument("sample_pk_batch: P must be >= 2");
  if (cfg.k < 2) throw std::invalid_argument("sample_pk_batch: K must be >= 2");
  int per_mod;
  if (cfg.k_per_modality) {
    per_mod = cfg.k;
  } else {
    if (cfg.k % 2 != 0) throw std::invalid_argument("sample_pk_batch: K must be even");
    per_mod = cfg.k / 2;
  }
  int num_ids = m.num_identities();
  if (cfg.p > num_ids) throw std::invalid_argument("sample_pk_batch: P exceeds identity count");

  std::vector<std::array<std::vector<int64_t>, 2>> by_id(static_cast<size_t>(num_ids));
  for (int64_t i = 0; i < static_cast<int64_t>(m.records.size()); ++i)
    by_id[static_cast<size_t>(m.records[static_cast<size_t>(i)].identity)]
         [static_cast<size_t>(m.records[static_cast<size_t>(i)].modality)]
             .push_back(i);

  // choose P distinct identities (partial Fisher-Yates)
  std::vector<int> ids(static_cast<size_t>(num_ids));
  for (int i = 0; i < num_ids; ++i) ids[static_cast<size_t>(i)] = i;
  for (int i = 0; i < cfg.p; ++i) {
    int j = i + static_cast<int>(rng.uniform_int(num_ids - i));
    std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
  }
  ids.resize(static_cast<size_t>(cfg.p));

  auto draw = [&](const std::vector<int64_t>& pool) {
    std::vector<int64_t> out;
    if (static_cast<int>(pool.size()) >= per_mod) {
      std::vector<int64_t> tmp = pool;
      for (int i = 0; i < per_mod; ++i) {
        int64_t j = i + rng.uniform_int(static_cast<int64_t>(tmp.size()) - i);
        std::swap(tmp[static_cast<size_t>(i)], tmp[static_cast<size_t>(j)]);
        out.push_back(tmp[static_cast<size_t>(i)]);
      }
    } else {
      // with replacement when the identity has too few images in a modality
      for (int i = 0; i < per_mod; ++i)
        out.push_back(pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))]);
    }
    return out;
  };

  std::vector<int64_t> vis_block, ir_block;
  for (int id : ids) {
    const auto& pools = by_id[static_cast<size_t>(id)];
    if (pools[0].empty() || pools[1].empty())
      throw std::runtime_error("sample_pk_batch: identity " + std::to_string(id) +
                               " missing a modality");
    for (int64_t i : draw(pools[0])) vis_block.push_back(i);
    for (int64_t i : draw(pools[1])) ir_block.push_back(i);
  }
  vis_block.insert(vis_block.end(), ir_block.begin(), ir_block.end());
  return vis_block;
}

const img::Image8& ImageCache::get(const std::string& path) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = cache_.find(path);
  if (it != cache_.end()) return it->second;
  return cache_.emplace(path, img::read_png(path)).first->second;
}

void AugmentConfig::validate() const {
  for (double p : {flip_prob, erase_prob, gray_prob, channel_aug_prob})
    if (p < 0.0 || p > 1.0)
      throw std::invalid_argument("AugmentConfig: probabilities must be in [0,1]");
}

Tensor augment(const Tensor& image, Modality mod, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("augment: expect [3,H,W]");
  int64_t th = cfg.target_h > 0 ? cfg.target_h : image.dim(1);
  int64_t tw = cfg.target_w > 0 ? cfg.target_w : image.dim(2);
  Tensor out = img::resize_bilinear(image, th, tw);

  if (rng.bernoulli(cfg.flip_prob)) {
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < th; ++y)
        for (int64_t x = 0; x < tw / 2; ++x)
          std::swap(out.at3(c, y, x), out.at3(c, y, tw - 1 - x));
  }

  if (mod == Modality::VIS && rng.bernoulli(cfg.channel_aug_prob)) {
    int64_t ch = rng.uniform_int(3);
    for (int64_t c = 0; c < 3; ++c) {
      if (c == ch) continue;
      for (int64_t i = 0; i < th * tw; ++i) out[c * th * tw + i] = out[ch * th * tw + i];
    }
  }

  if (rng.bernoulli(cfg.gray_prob)) {
    for (int64_t i = 0; i < th * tw; ++i) {
      double y = 0.299 * out[i] + 0.587 * out[th * tw + i] + 0.114 * out[2 * th * tw + i];
      out[i] = y;
      out[th * tw + i] = y;
      out[2 * th * tw + i] = y;
    }
  }

  if (rng.bernoulli(cfg.erase_prob)) {
    for (int attempt = 0; attempt < 10; ++attempt) {
      double area = rng.uniform(0.02, 0.4) * static_cast<double>(th * tw);
      double aspect = rng.uniform(0.3, 1.0 / 0.3);
      int64_t eh = static_cast<int64_t>(std::lround(std::sqrt(area * aspect)));
      int64_t ew = static_cast<int64_t>(std::lround(std::sqrt(area / aspect)));
      if (eh < 1 || ew < 1 || eh >= th || ew >= tw) continue;
      int64_t y0 = rng.uniform_int(th - eh + 1);
      int64_t x0 = rng.uniform_int(tw - ew + 1);
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = y0; y < y0 + eh; ++y)
          for (int64_t x = x0; x < x0 + ew; ++x) out.at3(c, y, x) = 0.0;
      break;
    }
  }
  check_finite(out, "augment output");
  return out;
}

namespace {

Batch assemble(const Manifest& m, const std::vector<int64_t>& indices, const AugmentConfig& aug,
               bool augment_enabled, ImageCache& cache, Rng* rng) {
  if (indices.empty()) throw std::invalid_argument("batch assembly: no records");
  Batch b;
  std::vector<Tensor> imgs;
  imgs.reserve(indices.size());
  for (int64_t idx : indices) {
    const SampleRecord& r = m.records[static_cast<size_t>(idx)];
    Tensor t = img::to_tensor(cache.get(m.full_path(r)));
    if (augment_enabled) {
      t = augment(t, r.modality, aug, *rng);
    } else {
      int64_t th = aug.target_h > 0 ? aug.target_h : t.dim(1);
      int64_t tw = aug.target_w > 0 ? aug.target_w : t.dim(2);
      t = img::resize_bilinear(t, th, tw);
    }
    imgs.push_back(std::move(t));
    b.identities.push_back(r.identity);
    b.modalities.push_back(static_cast<int>(r.modality));
  }
  int64_t n = static_cast<int64_t>(imgs.size());
  int64_t h = imgs[0].dim(1), w = imgs[0].dim(2);
  b.images = Tensor({n, 3, h, w});
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(imgs[static_cast<size_t>(i)].data(), 3 * h * w, b.images.data() + i * 3 * h * w);
  return b;
}

}  // namespace

Batch sample_pk_batch(const Manifest& m, const SamplerConfig& cfg, Rng& rng,
                      const AugmentConfig& aug, bool augment_enabled, ImageCache& cache) {
  std::vector<int64_t> idx = sample_pk_indices(m, cfg, rng);
  return assemble(m, idx, aug, augment_enabled, cache, &rng);
}

Batch load_records(const Manifest& m, const std::vector<int64_t>& indices,
                   const AugmentConfig& aug, ImageCache& cache) {
  return assemble(m, indices, aug, false, cache, nullptr);
}

}  // namespace icre
