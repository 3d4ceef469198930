#include "dist/encoders.hpp"

#include <cmath>
#include <mutex>

namespace dist::encoders {

void EncoderConfig::validate() const {
  if (frames < 1) throw ConfigError("encoder.frames must be >= 1");
  if (dim < 1) throw ConfigError("encoder.dim must be >= 1");
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patches))));
  if (patches < 1 || g * g != patches) throw ConfigError("encoder.patches must be a perfect square");
  if (backend != "stub" && backend != "pretrained")
    throw ConfigError("encoder.backend must be 'stub' or 'pretrained'");
}

void validate_clip(const VideoClip& clip, int frames) {
  if (static_cast<int>(clip.frames.size()) != frames)
    throw ShapeError("clip has " + std::to_string(clip.frames.size()) + " frames, expected " +
                     std::to_string(frames));
  const int h = clip.frames.front().height;
  const int w = clip.frames.front().width;
  for (const Image& im : clip.frames) {
    if (im.height != h || im.width != w) throw ShapeError("clip frames differ in size");
    if (im.pixels.size() != static_cast<std::size_t>(h) * w * 3)
      throw ShapeError("frame pixel buffer has the wrong size");
    for (float p : im.pixels)
      if (!std::isfinite(p)) throw DataError("clip '" + clip.source_id + "' has non-finite pixels");
  }
}

namespace {

// Average-pools the [y0,y1) x [x0,x1) region of `im` onto a grid x grid x 3
// layout, written into `out` as one row.
void pool_region(const Image& im, int y0, int y1, int x0, int x1, int grid,
                 Eigen::Ref<RowVec, 0, Eigen::InnerStride<>> out) {
  const int h = y1 - y0;
  const int w = x1 - x0;
  if (h < grid || w < grid) throw ShapeError("frame too small for the stub encoder grid");
  std::vector<double> acc(static_cast<std::size_t>(grid) * grid * 3, 0.0);
  std::vector<int> count(static_cast<std::size_t>(grid) * grid, 0);
  for (int y = y0; y < y1; ++y) {
    const int gy = (y - y0) * grid / h;
    for (int x = x0; x < x1; ++x) {
      const int gx = (x - x0) * grid / w;
      const std::size_t cell = static_cast<std::size_t>(gy) * grid + gx;
      ++count[cell];
      for (int c = 0; c < 3; ++c) acc[cell * 3 + c] += im.at(y, x, c);
    }
  }
  for (std::size_t cell = 0; cell < count.size(); ++cell)
    for (int c = 0; c < 3; ++c)
      out(static_cast<Eigen::Index>(cell * 3 + c)) = acc[cell * 3 + c] / count[cell];
}

constexpr std::uint64_t kFrameKey = 0x6672616d65ULL;
constexpr std::uint64_t kPatchKey = 0x7061746368ULL;
constexpr std::uint64_t kPosKey = 0x706f73ULL;

}  // namespace

StubVisualEncoder::StubVisualEncoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  grid_ = static_cast<int>(std::lround(std::sqrt(static_cast<double>(cfg_.patches))));
  const int frame_in = kFrameGrid * kFrameGrid * 3;
  const int patch_in = kPatchGrid * kPatchGrid * 3;
  frame_proj_ = {"encoder.frame_projection",
                 gaussian_matrix(CounterRng::mix(cfg_.seed ^ kFrameKey), frame_in, cfg_.dim,
                                 1.0 / std::sqrt(static_cast<double>(frame_in))),
                 {}};
  patch_proj_ = {"encoder.patch_projection",
                 gaussian_matrix(CounterRng::mix(cfg_.seed ^ kPatchKey), patch_in, cfg_.dim,
                                 1.0 / std::sqrt(static_cast<double>(patch_in))),
                 {}};
  patch_pos_ = {"encoder.patch_positions",
                gaussian_matrix(CounterRng::mix(cfg_.seed ^ kPosKey), cfg_.patches, cfg_.dim, 0.1),
                {}};
}

std::vector<ad::Parameter*> StubVisualEncoder::trainable() {
  if (!cfg_.visual_trainable || cfg_.stub_mode == StubVisualMode::Hash) return {};
  return {&frame_proj_, &patch_proj_, &patch_pos_};
}

RawVisualInputs StubVisualEncoder::pool(const VideoClip& clip) const {
  validate_clip(clip, cfg_.frames);
  RawVisualInputs raw;
  raw.frames.resize(cfg_.frames, kFrameGrid * kFrameGrid * 3);
  raw.patches.reserve(static_cast<std::size_t>(cfg_.frames));
  for (int t = 0; t < cfg_.frames; ++t) {
    const Image& im = clip.frames[static_cast<std::size_t>(t)];
    pool_region(im, 0, im.height, 0, im.width, kFrameGrid, raw.frames.row(t));
    Mat patches(cfg_.patches, kPatchGrid * kPatchGrid * 3);
    for (int py = 0; py < grid_; ++py) {
      for (int px = 0; px < grid_; ++px) {
        const int y0 = py * im.height / grid_;
        const int y1 = (py + 1) * im.height / grid_;
        const int x0 = px * im.width / grid_;
        const int x1 = (px + 1) * im.width / grid_;
        pool_region(im, y0, y1, x0, x1, kPatchGrid, patches.row(py * grid_ + px));
      }
    }
    raw.patches.push_back(std::move(patches));
  }
  return raw;
}

EncodedVideo StubVisualEncoder::encode_hashed(const VideoClip& clip) const {
  validate_clip(clip, cfg_.frames);
  EncodedVideo out;
  out.frames.values.resize(cfg_.frames, cfg_.dim);
  for (int t = 0; t < cfg_.frames; ++t) {
    const Image& im = clip.frames[static_cast<std::size_t>(t)];
    const std::uint64_t key =
        fnv1a64(im.pixels.data(), im.pixels.size() * sizeof(float), cfg_.seed);
    out.frames.values.row(t) = gaussian_matrix(key, 1, cfg_.dim, 1.0);
    out.patches.frames.push_back(gaussian_matrix(CounterRng::mix(key), cfg_.patches, cfg_.dim, 1.0));
  }
  return out;
}

EncodedVideo StubVisualEncoder::encode(const VideoClip& clip) const {
  if (cfg_.stub_mode == StubVisualMode::Hash) return encode_hashed(clip);
  const RawVisualInputs raw = pool(clip);
  EncodedVideo out;
  out.frames.values = raw.frames * frame_proj_.value;
  out.patches.frames.reserve(raw.patches.size());
  for (const Mat& p : raw.patches) out.patches.frames.push_back(p * patch_proj_.value + patch_pos_.value);
  return out;
}

StubVisualEncoder::GraphOutput StubVisualEncoder::project(ad::Graph& g, const RawVisualInputs& raw) {
  ad::Var wf = g.param(frame_proj_);
  ad::Var wp = g.param(patch_proj_);
  ad::Var pos = g.param(patch_pos_);
  GraphOutput out;
  out.frames = ad::matmul(g.constant(raw.frames), wf);
  for (const Mat& p : raw.patches) out.patches.push_back(ad::add(ad::matmul(g.constant(p), wp), pos));
  return out;
}

RowVec StubTextEncoder::encode(std::string_view text) const {
  if (text.empty()) throw Error("encode_text: empty string");
  RowVec v = gaussian_matrix(fnv1a64(text, CounterRng::mix(seed_)), 1, dim_, 1.0).row(0);
  return v / v.norm();
}

std::vector<double> StubTextEncoder::snapshot() const {
  // The stub has no stored weights; its state is the key, observable through
  // a fixed probe embedding.
  std::vector<double> out{static_cast<double>(dim_), static_cast<double>(seed_ >> 11)};
  const RowVec probe = encode("snapshot probe");
  out.insert(out.end(), probe.data(), probe.data() + probe.size());
  return out;
}

namespace {

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

PretrainedFactory& registry() {
  static PretrainedFactory f;
  return f;
}

}  // namespace

void register_pretrained_backend(PretrainedFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry() = std::move(factory);
}

Encoders make_encoders(const EncoderConfig& cfg) {
  cfg.validate();
  if (cfg.backend == "pretrained") {
    PretrainedFactory f;
    {
      std::lock_guard lock(registry_mutex());
      f = registry();
    }
    if (!f)
      throw ConfigError("encoder.backend=pretrained but no pretrained backend is registered (weights: '" +
                        cfg.weights_path + "')");
    return f(cfg);
  }
  Encoders e;
  e.visual = std::make_shared<StubVisualEncoder>(cfg);
  e.text = std::make_shared<StubTextEncoder>(cfg.dim, cfg.seed);
  return e;
}

}  // namespace dist::encoders
