#include "dist/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

namespace dist::data {

using nlohmann::json;

// ---- frame sampling -------------------------------------------------------

std::vector<int> sample_indices(int length, const SamplingPolicy& policy, std::mt19937_64* rng) {
  if (length < 1) throw DataError("sample_frames: empty video");
  if (policy.frames < 1) throw ConfigError("sampling policy needs frames >= 1");
  const int t = policy.frames;
  std::vector<int> out(static_cast<std::size_t>(t));
  const bool random = policy.mode == SamplingMode::TrainRandomPerSegment && length >= t;
  if (random && rng == nullptr) throw ConfigError("train-mode frame sampling needs an rng");
  for (int k = 0; k < t; ++k) {
    if (random) {
      // Segment k covers [k*length/t, (k+1)*length/t).
      const int lo = static_cast<int>(static_cast<long long>(k) * length / t);
      const int hi = static_cast<int>(static_cast<long long>(k + 1) * length / t) - 1;
      std::uniform_int_distribution<int> pick(lo, std::max(lo, hi));
      out[static_cast<std::size_t>(k)] = pick(*rng);
    } else {
      const double center = (k + 0.5) * static_cast<double>(length) / t;
      out[static_cast<std::size_t>(k)] = std::min(length - 1, static_cast<int>(std::floor(center)));
    }
  }
  return out;
}

VideoClip sample_frames(const Video& video, const SamplingPolicy& policy, std::mt19937_64* rng,
                        int class_id, std::string source_id) {
  const std::vector<int> idx =
      sample_indices(static_cast<int>(video.frames.size()), policy, rng);
  VideoClip clip;
  clip.class_id = class_id;
  clip.source_id = std::move(source_id);
  clip.frames.reserve(idx.size());
  for (int i : idx) clip.frames.push_back(video.frames[static_cast<std::size_t>(i)]);
  return clip;
}

// ---- augmentation ---------------------------------------------------------

Image hflip(const Image& im) {
  Image out(im.height, im.width);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = im.at(y, im.width - 1 - x, c);
  return out;
}

Image crop(const Image& im, int y0, int x0, int height, int width) {
  if (height < 1 || width < 1 || y0 < 0 || x0 < 0 || y0 + height > im.height ||
      x0 + width > im.width)
    throw ShapeError("crop window " + std::to_string(height) + "x" + std::to_string(width) +
                     " does not fit a " + std::to_string(im.height) + "x" +
                     std::to_string(im.width) + " frame");
  Image out(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = im.at(y0 + y, x0 + x, c);
  return out;
}

VideoClip augment(const VideoClip& clip, AugmentMode mode, const AugmentConfig& cfg,
                  std::mt19937_64* rng) {
  if (clip.frames.empty()) throw ShapeError("augment: empty clip");
  if (!(cfg.crop_area > 0.0)) throw ConfigError("augment: crop_area must be > 0");
  const int h = clip.frames.front().height;
  const int w = clip.frames.front().width;
  const double side = std::sqrt(cfg.crop_area);
  const int ch = static_cast<int>(std::lround(side * h));
  const int cw = static_cast<int>(std::lround(side * w));
  if (ch > h || cw > w) throw ShapeError("augment: crop larger than frame");

  int y0 = (h - ch) / 2;
  int x0 = (w - cw) / 2;
  bool flip = false;
  double gain = 1.0;
  double shift = 0.0;
  if (mode == AugmentMode::Train) {
    if (rng == nullptr) throw ConfigError("train-mode augmentation needs an rng");
    std::uniform_int_distribution<int> py(0, h - ch);
    std::uniform_int_distribution<int> px(0, w - cw);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    y0 = py(*rng);
    x0 = px(*rng);
    flip = unit(*rng) < cfg.flip_probability;
    gain = 1.0 + cfg.jitter * (2.0 * unit(*rng) - 1.0);
    shift = cfg.jitter * (2.0 * unit(*rng) - 1.0) * 0.5;
  }

  VideoClip out;
  out.class_id = clip.class_id;
  out.source_id = clip.source_id;
  out.frames.reserve(clip.frames.size());
  for (const Image& im : clip.frames) {
    if (im.height != h || im.width != w) throw ShapeError("augment: frames differ in size");
    Image f = crop(im, y0, x0, ch, cw);
    if (flip) f = hflip(f);
    if (gain != 1.0 || shift != 0.0)
      for (float& p : f.pixels)
        p = static_cast<float>(std::clamp(gain * p + shift, 0.0, 1.0));
    out.frames.push_back(std::move(f));
  }
  return out;
}

// ---- manifests ------------------------------------------------------------

std::size_t DatasetSplit::clip_count() const {
  std::size_t n = 0;
  for (const auto& [label, ids] : clips) n += ids.size();
  return n;
}

const DatasetSplit& Manifest::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw DataError("manifest has no split '" + name + "'");
  return it->second;
}

std::optional<std::array<int, 3>> protocol_counts(const std::string& protocol) {
  static const std::map<std::string, std::array<int, 3>> table = {
      {"hmdb51", {31, 10, 10}},     {"ucf101", {70, 10, 21}},     {"kinetics", {64, 12, 24}},
      {"ssv2_full", {64, 12, 24}},  {"ssv2_small", {64, 12, 24}},
  };
  auto it = table.find(protocol);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

Manifest parse_manifest(std::string_view json_text) {
  Manifest m;
  try {
    const json doc = json::parse(json_text);
    for (const auto& [name, s] : doc.at("splits").items()) {
      DatasetSplit split;
      split.name = name;
      split.classes = s.at("classes").get<std::vector<std::string>>();
      if (s.contains("clips"))
        split.clips = s.at("clips").get<std::map<std::string, std::vector<std::string>>>();
      m.splits.emplace(name, std::move(split));
    }
    if (doc.contains("protocol")) m.protocol = doc.at("protocol").get<std::string>();
    if (doc.contains("synthetic")) m.synthetic_spec = doc.at("synthetic").dump();
  } catch (const json::exception& ex) {
    throw SchemaError(std::string("manifest schema violation: ") + ex.what());
  }
  return m;
}

void validate_manifest(const Manifest& m) {
  std::map<std::string, std::string> owner;
  for (const auto& [name, split] : m.splits) {
    std::set<std::string> local;
    for (const auto& label : split.classes) {
      if (!local.insert(label).second)
        throw SchemaError("class '" + label + "' listed twice in split '" + name + "'");
      auto [it, fresh] = owner.emplace(label, name);
      if (!fresh)
        throw SplitOverlap("class '" + label + "' appears in both '" + it->second + "' and '" +
                           name + "'");
      auto c = split.clips.find(label);
      if (c == split.clips.end() || c->second.empty())
        throw MissingClips("class '" + label + "' in split '" + name + "' has no clips");
    }
    for (const auto& [label, ids] : split.clips)
      if (!local.count(label))
        throw SchemaError("split '" + name + "' lists clips for undeclared class '" + label + "'");
  }
  if (m.protocol) {
    const auto counts = protocol_counts(*m.protocol);
    if (!counts) throw SchemaError("unknown split protocol '" + *m.protocol + "'");
    const char* names[3] = {"train", "val", "test"};
    for (int i = 0; i < 3; ++i) {
      auto it = m.splits.find(names[i]);
      const int have = it == m.splits.end() ? 0 : static_cast<int>(it->second.classes.size());
      if (have != (*counts)[static_cast<std::size_t>(i)])
        throw DataError("protocol " + *m.protocol + " expects " +
                        std::to_string((*counts)[static_cast<std::size_t>(i)]) + " " + names[i] +
                        " classes, manifest has " + std::to_string(have));
    }
  }
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Manifest load_split(const std::filesystem::path& manifest_path) {
  Manifest m = parse_manifest(read_file(manifest_path));
  validate_manifest(m);
  return m;
}

std::string manifest_to_json(const Manifest& m) {
  json doc;
  json splits = json::object();
  for (const auto& [name, s] : m.splits) splits[name] = {{"classes", s.classes}, {"clips", s.clips}};
  doc["splits"] = std::move(splits);
  if (m.protocol) doc["protocol"] = *m.protocol;
  if (m.synthetic_spec) doc["synthetic"] = json::parse(*m.synthetic_spec);
  return doc.dump(2) + "\n";
}

// ---- synthetic generator --------------------------------------------------

namespace {

struct Rgb {
  float r, g, b;
};

constexpr std::array<Rgb, 8> kPalette = {{{1.00f, 0.15f, 0.15f},
                                          {0.15f, 0.90f, 0.20f},
                                          {0.20f, 0.35f, 1.00f},
                                          {1.00f, 0.90f, 0.10f},
                                          {0.10f, 0.90f, 0.90f},
                                          {0.95f, 0.20f, 0.90f},
                                          {0.95f, 0.95f, 0.95f},
                                          {1.00f, 0.55f, 0.10f}}};
constexpr std::array<const char*, 8> kColorNames = {"red",  "green",   "blue",  "yellow",
                                                    "cyan", "magenta", "white", "orange"};
constexpr std::array<const char*, 6> kShapeNames = {"square", "circle", "triangle",
                                                    "cross",  "ring",   "bar"};
constexpr int kShapes = 6;
constexpr int kObjectKinds = kShapes * 8;

std::array<double, 2> direction_vector(Direction d) {
  switch (d) {
    case Direction::Left: return {-1.0, 0.0};
    case Direction::Right: return {1.0, 0.0};
    case Direction::Up: return {0.0, -1.0};
    case Direction::Down: return {0.0, 1.0};
  }
  return {0.0, 0.0};
}

Direction opposite(Direction d) {
  switch (d) {
    case Direction::Left: return Direction::Right;
    case Direction::Right: return Direction::Left;
    case Direction::Up: return Direction::Down;
    case Direction::Down: return Direction::Up;
  }
  return d;
}

const char* direction_name(Direction d) {
  switch (d) {
    case Direction::Left: return "left";
    case Direction::Right: return "right";
    case Direction::Up: return "up";
    case Direction::Down: return "down";
  }
  return "";
}

// Displacement from the start after playback fraction tau.
std::array<double, 2> path_offset(const std::vector<Direction>& phases, double extent, double tau) {
  const int n = static_cast<int>(phases.size());
  std::array<double, 2> off{0.0, 0.0};
  if (n == 0) return off;
  const double per_phase = extent / n;
  for (int k = 0; k < n; ++k) {
    const double lo = static_cast<double>(k) / n;
    const double frac = std::clamp((tau - lo) * n, 0.0, 1.0);
    const auto dir = direction_vector(phases[static_cast<std::size_t>(k)]);
    off[0] += dir[0] * per_phase * frac;
    off[1] += dir[1] * per_phase * frac;
  }
  return off;
}

bool inside_shape(Shape s, double dx, double dy, double r) {
  const double ax = std::abs(dx);
  const double ay = std::abs(dy);
  switch (s) {
    case Shape::Square: return ax <= r && ay <= r;
    case Shape::Circle: return dx * dx + dy * dy <= r * r;
    case Shape::Triangle: return dy >= -r && dy <= r && ax <= (dy + r) * 0.5;
    case Shape::Cross: return (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r);
    case Shape::Ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.25 * r * r;
    }
    case Shape::Bar: return ax <= r && ay <= r / 3.0;
  }
  return false;
}

void draw(Image& im, const ObjectKind& obj, double cx, double cy, double r) {
  const Rgb col = kPalette[static_cast<std::size_t>(obj.color)];
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
  const int y1 = std::min(im.height - 1, static_cast<int>(std::ceil(cy + r + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
  const int x1 = std::min(im.width - 1, static_cast<int>(std::ceil(cx + r + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (inside_shape(obj.shape, x + 0.5 - cx, y + 0.5 - cy, r)) {
        im.at(y, x, 0) = col.r;
        im.at(y, x, 1) = col.g;
        im.at(y, x, 2) = col.b;
      }
}

ObjectKind object_from_index(int k) { return {static_cast<Shape>(k % kShapes), k / kShapes}; }

std::string join_names(const std::vector<ObjectKind>& objs) {
  std::string s;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    if (i > 0) s += (i + 1 == objs.size()) ? " and " : ", ";
    s += objs[i].name();
  }
  return s;
}

}  // namespace

std::string ObjectKind::name() const {
  return std::string(kColorNames[static_cast<std::size_t>(color)]) + " " +
         kShapeNames[static_cast<std::size_t>(shape)];
}

void SyntheticSpec::validate() const {
  if (train_classes < 0 || val_classes < 0 || test_classes < 0 || n_classes() < 1)
    throw ConfigError("synthetic spec needs at least one class");
  if (objects_per_class < 1 || objects_per_class > kObjectKinds)
    throw ConfigError("synthetic objects_per_class out of range");
  if (motion_phases < 1) throw ConfigError("synthetic motion_phases must be >= 1");
  if (clips_per_class < 1) throw ConfigError("synthetic clips_per_class must be >= 1");
  if (image_size < 8) throw ConfigError("synthetic image_size must be >= 8");
  if (frames_per_video < 1) throw ConfigError("synthetic frames_per_video must be >= 1");
  if (object_radius <= 0.0) throw ConfigError("synthetic object_radius must be > 0");
  if (noise < 0.0 || position_jitter < 0.0 || speed_jitter < 0.0 || motion_extent < 0.0)
    throw ConfigError("synthetic noise/jitter/extent must be >= 0");
  if (distractors < 0) throw ConfigError("synthetic distractors must be >= 0");
}

std::string synthetic_spec_to_json(const SyntheticSpec& s, std::uint64_t seed) {
  json j = {{"kind", "synthetic"},
            {"seed", seed},
            {"train_classes", s.train_classes},
            {"val_classes", s.val_classes},
            {"test_classes", s.test_classes},
            {"objects_per_class", s.objects_per_class},
            {"motion_phases", s.motion_phases},
            {"clips_per_class", s.clips_per_class},
            {"image_size", s.image_size},
            {"frames_per_video", s.frames_per_video},
            {"motion_extent", s.motion_extent},
            {"object_radius", s.object_radius},
            {"position_jitter", s.position_jitter},
            {"speed_jitter", s.speed_jitter},
            {"noise", s.noise},
            {"distractors", s.distractors},
            {"reversed_pairs", s.reversed_pairs}};
  return j.dump(2) + "\n";
}

std::pair<SyntheticSpec, std::uint64_t> synthetic_spec_from_json(std::string_view text) {
  SyntheticSpec s;
  std::uint64_t seed = 0;
  try {
    const json j = json::parse(text);
    if (j.value("kind", std::string("synthetic")) != "synthetic")
      throw SchemaError("synthetic spec must have kind 'synthetic'");
    seed = j.value("seed", std::uint64_t{0});
    s.train_classes = j.value("train_classes", s.train_classes);
    s.val_classes = j.value("val_classes", s.val_classes);
    s.test_classes = j.value("test_classes", s.test_classes);
    s.objects_per_class = j.value("objects_per_class", s.objects_per_class);
    s.motion_phases = j.value("motion_phases", s.motion_phases);
    s.clips_per_class = j.value("clips_per_class", s.clips_per_class);
    s.image_size = j.value("image_size", s.image_size);
    s.frames_per_video = j.value("frames_per_video", s.frames_per_video);
    s.motion_extent = j.value("motion_extent", s.motion_extent);
    s.object_radius = j.value("object_radius", s.object_radius);
    s.position_jitter = j.value("position_jitter", s.position_jitter);
    s.speed_jitter = j.value("speed_jitter", s.speed_jitter);
    s.noise = j.value("noise", s.noise);
    s.distractors = j.value("distractors", s.distractors);
    s.reversed_pairs = j.value("reversed_pairs", s.reversed_pairs);
  } catch (const json::exception& ex) {
    throw SchemaError(std::string("synthetic spec schema violation: ") + ex.what());
  }
  s.validate();
  return {s, seed};
}

SyntheticDataset::SyntheticDataset(SyntheticSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), seed_(seed) {
  spec_.validate();
  CounterRng rng(CounterRng::mix(seed_ ^ 0x636c6173736573ULL));
  const int n = spec_.n_classes();
  const double margin = spec_.object_radius + spec_.position_jitter + 1.0;
  const double size = spec_.image_size;
  std::set<std::vector<int>> used_sets;

  auto pick = [&](int bound) { return static_cast<int>(rng.next() % static_cast<std::uint64_t>(bound)); };

  for (int k = 0; k < n; ++k) {
    SyntheticClass c;
    char label[16];
    std::snprintf(label, sizeof label, "syn%02d", k);
    c.label = label;
    if (spec_.reversed_pairs && k % 2 == 1) {
      const SyntheticClass& fwd = classes_[static_cast<std::size_t>(k - 1)];
      c.objects = fwd.objects;
      c.reversed = true;
      c.partner = k - 1;
      for (auto it = fwd.phases.rbegin(); it != fwd.phases.rend(); ++it) c.phases.push_back(opposite(*it));
      const auto end = path_offset(fwd.phases, spec_.motion_extent, 1.0);
      for (const auto& s : fwd.starts) c.starts.push_back({s[0] + end[0], s[1] + end[1]});
      classes_[static_cast<std::size_t>(k - 1)].partner = k;
      classes_.push_back(std::move(c));
      continue;
    }
    // Object set, unique among base classes.
    std::vector<int> ids;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw DegenerateSpec("synthetic spec cannot give every class a distinct object set");
      ids.clear();
      while (static_cast<int>(ids.size()) < spec_.objects_per_class) {
        const int id = pick(kObjectKinds);
        if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
      }
      std::vector<int> key = ids;
      std::sort(key.begin(), key.end());
      if (used_sets.insert(key).second) break;
    }
    for (int id : ids) c.objects.push_back(object_from_index(id));
    // Motion phases: consecutive phases differ, and the path must not read
    // the same backwards (otherwise a reversed partner would be identical).
    for (int attempt = 0;; ++attempt) {
      c.phases.clear();
      for (int p = 0; p < spec_.motion_phases; ++p) {
        Direction d;
        do {
          d = static_cast<Direction>(pick(4));
        } while (p > 0 && (d == c.phases.back() || d == opposite(c.phases.back())));
        c.phases.push_back(d);
      }
      std::vector<Direction> back;
      for (auto it = c.phases.rbegin(); it != c.phases.rend(); ++it) back.push_back(opposite(*it));
      if (back != c.phases || attempt > 100) break;
    }
    // Start positions keeping the whole path inside the frame.
    double lo[2] = {0.0, 0.0};
    double hi[2] = {0.0, 0.0};
    for (int s = 0; s <= 4 * spec_.motion_phases; ++s) {
      const auto off = path_offset(c.phases, spec_.motion_extent, s / (4.0 * spec_.motion_phases));
      for (int a = 0; a < 2; ++a) {
        lo[a] = std::min(lo[a], off[static_cast<std::size_t>(a)]);
        hi[a] = std::max(hi[a], off[static_cast<std::size_t>(a)]);
      }
    }
    const double minx = margin - lo[0] + spec_.speed_jitter * std::abs(lo[0]);
    const double maxx = size - margin - hi[0] - spec_.speed_jitter * std::abs(hi[0]);
    const double miny = margin - lo[1] + spec_.speed_jitter * std::abs(lo[1]);
    const double maxy = size - margin - hi[1] - spec_.speed_jitter * std::abs(hi[1]);
    if (minx > maxx || miny > maxy)
      throw DegenerateSpec("synthetic motion does not fit inside the frame");
    for (int o = 0; o < spec_.objects_per_class; ++o) {
      std::array<double, 2> best{};
      double best_gap = -1.0;
      for (int attempt = 0; attempt < 64; ++attempt) {
        const std::array<double, 2> p{minx + rng.uniform() * (maxx - minx),
                                      miny + rng.uniform() * (maxy - miny)};
        double gap = 1e9;
        for (const auto& q : c.starts) gap = std::min(gap, std::hypot(p[0] - q[0], p[1] - q[1]));
        if (gap > best_gap) {
          best_gap = gap;
          best = p;
        }
        if (gap >= 3.0 * spec_.object_radius) break;
      }
      c.starts.push_back(best);
    }
    classes_.push_back(std::move(c));
  }

  // Two classes are identical when they show the same objects on the same paths.
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      auto oa = classes_[static_cast<std::size_t>(a)].objects;
      auto ob = classes_[static_cast<std::size_t>(b)].objects;
      auto by_id = [](const ObjectKind& x, const ObjectKind& y) {
        return std::pair(x.color, static_cast<int>(x.shape)) < std::pair(y.color, static_cast<int>(y.shape));
      };
      std::sort(oa.begin(), oa.end(), by_id);
      std::sort(ob.begin(), ob.end(), by_id);
      if (oa != ob) continue;
      bool same = true;
      for (int s = 0; s <= 16 && same; ++s) {
        const auto pa = positions(a, s / 16.0);
        const auto pb = positions(b, s / 16.0);
        for (std::size_t i = 0; i < pa.size() && same; ++i)
          same = std::abs(pa[i][0] - pb[i][0]) < 1e-9 && std::abs(pa[i][1] - pb[i][1]) < 1e-9;
      }
      if (same)
        throw DegenerateSpec("synthetic classes " + classes_[static_cast<std::size_t>(a)].label +
                             " and " + classes_[static_cast<std::size_t>(b)].label +
                             " are identical");
    }
  }

  const std::array<std::pair<const char*, int>, 3> split_sizes = {
      {{"train", spec_.train_classes}, {"val", spec_.val_classes}, {"test", spec_.test_classes}}};
  int next = 0;
  for (const auto& [name, count] : split_sizes) {
    DatasetSplit split;
    split.name = name;
    for (int i = 0; i < count; ++i, ++next) {
      const std::string& label = classes_[static_cast<std::size_t>(next)].label;
      split.classes.push_back(label);
      auto& ids = split.clips[label];
      for (int clip = 0; clip < spec_.clips_per_class; ++clip)
        ids.push_back("syn:" + std::to_string(next) + ":" + std::to_string(clip));
    }
    manifest_.splits.emplace(name, std::move(split));
  }
  manifest_.synthetic_spec = synthetic_spec_to_json(spec_, seed_);
}

std::size_t SyntheticDataset::total_clips() const {
  return static_cast<std::size_t>(spec_.n_classes()) * static_cast<std::size_t>(spec_.clips_per_class);
}

std::vector<std::array<double, 2>> SyntheticDataset::positions(int class_index, double tau) const {
  const SyntheticClass& c = classes_.at(static_cast<std::size_t>(class_index));
  const auto off = path_offset(c.phases, spec_.motion_extent, tau);
  std::vector<std::array<double, 2>> out;
  for (const auto& s : c.starts) out.push_back({s[0] + off[0], s[1] + off[1]});
  return out;
}

Video SyntheticDataset::render(int class_index, int clip_index) const {
  if (class_index < 0 || class_index >= static_cast<int>(classes_.size()))
    throw DataError("synthetic class index out of range");
  if (clip_index < 0 || clip_index >= spec_.clips_per_class)
    throw DataError("synthetic clip index out of range");
  const SyntheticClass& c = classes_[static_cast<std::size_t>(class_index)];
  CounterRng rng(CounterRng::mix(seed_ ^ CounterRng::mix(static_cast<std::uint64_t>(class_index) << 32 |
                                                         static_cast<std::uint32_t>(clip_index))));
  const double j = spec_.position_jitter;
  const double dx = j * (2.0 * rng.uniform() - 1.0);
  const double dy = j * (2.0 * rng.uniform() - 1.0);
  const double speed = 1.0 + spec_.speed_jitter * (2.0 * rng.uniform() - 1.0);
  const double size = spec_.image_size;
  const double r = spec_.object_radius;

  struct Distractor {
    ObjectKind kind;
    double x, y;
  };
  std::vector<Distractor> distractors;
  for (int d = 0; d < spec_.distractors; ++d) {
    ObjectKind kind;
    do {
      kind = object_from_index(static_cast<int>(rng.next() % kObjectKinds));
    } while (std::find(c.objects.begin(), c.objects.end(), kind) != c.objects.end());
    distractors.push_back({kind, r + 1 + rng.uniform() * (size - 2 * r - 2),
                           r + 1 + rng.uniform() * (size - 2 * r - 2)});
  }

  Video v;
  const int frames = spec_.frames_per_video;
  v.frames.reserve(static_cast<std::size_t>(frames));
  const auto origin = path_offset(c.phases, spec_.motion_extent, 0.0);
  for (int f = 0; f < frames; ++f) {
    const double tau = frames == 1 ? 0.0 : static_cast<double>(f) / (frames - 1);
    Image im(spec_.image_size, spec_.image_size);
    for (const auto& d : distractors) draw(im, d.kind, d.x, d.y, r * 0.8);
    const auto off = path_offset(c.phases, spec_.motion_extent, tau);
    for (std::size_t o = 0; o < c.objects.size(); ++o) {
      const double x = c.starts[o][0] + speed * (off[0] - origin[0]) + dx;
      const double y = c.starts[o][1] + speed * (off[1] - origin[1]) + dy;
      draw(im, c.objects[o], x, y, r);
    }
    if (spec_.noise > 0.0)
      for (float& p : im.pixels)
        p = static_cast<float>(std::clamp(p + spec_.noise * rng.gaussian(), 0.0, 1.0));
    v.frames.push_back(std::move(im));
  }
  return v;
}

Video SyntheticDataset::load(const std::string& clip_id) const {
  int cls = -1;
  int clip = -1;
  if (std::sscanf(clip_id.c_str(), "syn:%d:%d", &cls, &clip) != 2)
    throw DataError("not a synthetic clip id: '" + clip_id + "'");
  return render(cls, clip);
}

std::vector<std::string> SyntheticDataset::spatial_attributes(int class_index, int count) const {
  const SyntheticClass& c = classes_.at(static_cast<std::size_t>(class_index));
  static constexpr std::array<const char*, 8> suffixes = {"",        " edge",    " center", " outline",
                                                          " corner", " surface", " shadow", " side"};
  std::vector<std::string> out;
  const std::size_t n = c.objects.size();
  for (std::size_t k = 0; static_cast<int>(out.size()) < count; ++k) {
    const std::size_t round = k / n;
    std::string name = c.objects[k % n].name();
    if (round < suffixes.size()) {
      name += suffixes[round];
    } else {
      name += " part " + std::to_string(round);
    }
    out.push_back(std::move(name));
  }
  return out;
}

std::vector<std::string> SyntheticDataset::temporal_attributes(int class_index, int count) const {
  const SyntheticClass& c = classes_.at(static_cast<std::size_t>(class_index));
  const std::string who = join_names(c.objects);
  const int phases = static_cast<int>(c.phases.size());
  std::vector<std::string> out;
  for (int k = 0; k < count; ++k) {
    const int p = std::min(phases - 1, static_cast<int>(std::floor((k + 0.5) * phases / count)));
    out.push_back(who + " move " + direction_name(c.phases[static_cast<std::size_t>(p)]));
  }
  return out;
}

knowledge::KnowledgeBase SyntheticDataset::fixture_kb(int spatial_count, int temporal_count) const {
  knowledge::KnowledgeBase kb;
  kb.fingerprint.spatial_count = spatial_count;
  kb.fingerprint.temporal_count = temporal_count;
  kb.fingerprint.model_id = "synthetic-fixture";
  for (int k = 0; k < static_cast<int>(classes_.size()); ++k) {
    knowledge::KnowledgeEntry e;
    e.label = classes_[static_cast<std::size_t>(k)].label;
    e.spatial = spatial_attributes(k, spatial_count);
    e.temporal = temporal_attributes(k, temporal_count);
    e.provenance.model_id = "synthetic-fixture";
    e.provenance.prompt_hash =
        hex64(fnv1a64(knowledge::build_spatial_prompt(e.label, spatial_count) + "\n" +
                      knowledge::build_temporal_prompt(e.label, temporal_count)));
    e.provenance.timestamp = "1970-01-01T00:00:00Z";
    kb.entries.emplace(e.label, std::move(e));
  }
  kb.validate();
  return kb;
}

std::string SyntheticDataset::fixture_responses_json(int spatial_count, int temporal_count) const {
  json doc = json::object();
  for (int k = 0; k < static_cast<int>(classes_.size()); ++k) {
    auto join = [](const std::vector<std::string>& items) {
      std::string s;
      for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "; " : "") + items[i];
      return s;
    };
    doc[classes_[static_cast<std::size_t>(k)].label] = {
        {"spatial", join(spatial_attributes(k, spatial_count))},
        {"temporal", join(temporal_attributes(k, temporal_count))}};
  }
  return doc.dump(2) + "\n";
}

std::shared_ptr<SyntheticDataset> generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  return std::make_shared<SyntheticDataset>(spec, seed);
}

// ---- dataset opening ------------------------------------------------------

namespace {

std::mutex& source_mutex() {
  static std::mutex m;
  return m;
}

SourceFactory& source_factory() {
  static SourceFactory f;
  return f;
}

}  // namespace

void register_video_source(SourceFactory factory) {
  std::lock_guard lock(source_mutex());
  source_factory() = std::move(factory);
}

Dataset make_dataset(std::shared_ptr<const SyntheticDataset> synthetic) {
  Dataset d;
  d.manifest = synthetic->manifest();
  d.content_hash = hex64(fnv1a64(synthetic_spec_to_json(synthetic->spec(), synthetic->seed())));
  d.source = synthetic;
  d.synthetic = std::move(synthetic);
  return d;
}

Dataset open_dataset(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& ex) {
    throw SchemaError("cannot parse " + path.string() + ": " + ex.what());
  }
  Dataset d;
  if (!doc.contains("splits")) {
    auto [spec, seed] = synthetic_spec_from_json(text);
    d = make_dataset(generate_synthetic(spec, seed));
    d.content_hash = hex64(fnv1a64(text));
    return d;
  }
  d.manifest = parse_manifest(text);
  validate_manifest(d.manifest);
  d.content_hash = hex64(fnv1a64(text));
  if (d.manifest.synthetic_spec) {
    auto [spec, seed] = synthetic_spec_from_json(*d.manifest.synthetic_spec);
    auto syn = generate_synthetic(spec, seed);
    d.source = syn;
    d.synthetic = syn;
    return d;
  }
  SourceFactory f;
  {
    std::lock_guard lock(source_mutex());
    f = source_factory();
  }
  if (!f)
    throw DataError("manifest " + path.string() +
                    " references external clips but no video ingestion backend is registered");
  d.source = f(d.manifest);
  return d;
}

}  // namespace dist::data
