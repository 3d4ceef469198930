#include "dist/data.hpp"
#include "dist/encoders.hpp"
#include "dist/metrics.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <set>

using namespace dist;
using namespace dist::data;

namespace {

Video counting_video(int n) {
  Video v;
  for (int i = 0; i < n; ++i) {
    Image im(4, 4);
    for (auto& p : im.pixels) p = static_cast<float>(i) / static_cast<float>(n);
    v.frames.push_back(im);
  }
  return v;
}

VideoClip random_clip(std::mt19937_64& rng, int t, int size) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  VideoClip c;
  for (int i = 0; i < t; ++i) {
    Image im(size, size);
    for (auto& p : im.pixels) p = u(rng);
    c.frames.push_back(im);
  }
  return c;
}

std::string manifest_json(const std::vector<std::string>& train, const std::vector<std::string>& test) {
  nlohmann::json j;
  auto split = [](const std::vector<std::string>& cls) {
    nlohmann::json s = {{"classes", cls}, {"clips", nlohmann::json::object()}};
    for (const auto& c : cls) s["clips"][c] = {c + "/0", c + "/1"};
    return s;
  };
  j["splits"]["train"] = split(train);
  j["splits"]["val"] = split({"v"});
  j["splits"]["test"] = split(test);
  return j.dump();
}

}  // namespace

TEST(Sampling, SegmentCentersAndShortVideos) {
  SamplingPolicy eval{8, SamplingMode::EvalCenterPerSegment};
  EXPECT_EQ(sample_indices(80, eval, nullptr), (std::vector<int>{5, 15, 25, 35, 45, 55, 65, 75}));
  EXPECT_EQ(sample_indices(8, eval, nullptr), (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
  const auto s = sample_indices(3, eval, nullptr);
  ASSERT_EQ(s.size(), 8u);
  EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
  EXPECT_EQ(std::set<int>(s.begin(), s.end()), (std::set<int>{0, 1, 2}));
  // nearest index: frame k of 8 maps to floor((k + 0.5) * 3 / 8)
  for (int k = 0; k < 8; ++k) EXPECT_EQ(s[static_cast<std::size_t>(k)], static_cast<int>((k + 0.5) * 3 / 8));
  EXPECT_THROW(sample_indices(0, eval, nullptr), DataError);
}

TEST(Sampling, TrainModeStaysInSegmentsAndOrdered) {
  std::mt19937_64 rng(1);
  SamplingPolicy train{8, SamplingMode::TrainRandomPerSegment};
  for (int rep = 0; rep < 50; ++rep) {
    const auto s = sample_indices(37, train, &rng);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    for (int k = 0; k < 8; ++k) {
      EXPECT_GE(s[static_cast<std::size_t>(k)], k * 37 / 8);
      EXPECT_LT(s[static_cast<std::size_t>(k)], (k + 1) * 37 / 8);
    }
  }
  const auto clip = sample_frames(counting_video(24), {8, SamplingMode::EvalCenterPerSegment}, nullptr);
  EXPECT_EQ(clip.frames.size(), 8u);
}

TEST(Augment, FlipInvolutionEvalDeterminismAndClipConsistency) {
  std::mt19937_64 rng(2);
  auto clip = random_clip(rng, 4, 16);
  EXPECT_EQ(hflip(hflip(clip.frames[0])), clip.frames[0]);
  AugmentConfig cfg;
  const auto e1 = augment(clip, AugmentMode::Eval, cfg, nullptr);
  const auto e2 = augment(clip, AugmentMode::Eval, cfg, nullptr);
  EXPECT_EQ(e1.frames, e2.frames);
  // identical frames stay identical after a random train transform
  VideoClip same;
  same.frames.assign(4, clip.frames[0]);
  for (int rep = 0; rep < 10; ++rep) {
    const auto t = augment(same, AugmentMode::Train, cfg, &rng);
    for (const auto& f : t.frames) EXPECT_EQ(f, t.frames[0]);
  }
  EXPECT_THROW(crop(clip.frames[0], 0, 0, 17, 4), ShapeError);
}

TEST(Manifest, DisjointSplitsAndGuards) {
  const Manifest m = parse_manifest(manifest_json({"a", "b"}, {"c"}));
  EXPECT_NO_THROW(validate_manifest(m));
  EXPECT_EQ(m.split("train").classes.size(), 2u);
  EXPECT_THROW(validate_manifest(parse_manifest(manifest_json({"a", "b"}, {"b"}))), SplitOverlap);
  EXPECT_THROW(parse_manifest("{\"splits\": 4}"), SchemaError);
}

TEST(Manifest, ProtocolCounts) {
  auto counts = protocol_counts("hmdb51");
  ASSERT_TRUE(counts.has_value());
  EXPECT_EQ(*counts, (std::array<int, 3>{31, 10, 10}));
  auto j = nlohmann::json::parse(manifest_json({"a", "b"}, {"c"}));
  j["protocol"] = "hmdb51";
  EXPECT_THROW(validate_manifest(parse_manifest(j.dump())), DataError);
}

TEST(Synthetic, DeterministicCountsAndFixture) {
  SyntheticSpec spec;
  spec.train_classes = 10;
  spec.val_classes = 0;
  spec.test_classes = 0;
  auto a = generate_synthetic(spec, 3);
  auto b = generate_synthetic(spec, 3);
  EXPECT_EQ(a->total_clips(), 200u);
  EXPECT_EQ(a->fixture_kb(6, 3).entries.size(), 10u);
  EXPECT_EQ(a->render(4, 7).frames, b->render(4, 7).frames);
  EXPECT_EQ(synthetic_spec_from_json(synthetic_spec_to_json(spec, 3)).second, 3u);
}

TEST(Synthetic, ReversedPairsShareFrameHistogramsButNotOrder) {
  SyntheticSpec spec;
  spec.noise = 0.0;
  spec.distractors = 0;
  spec.position_jitter = 0.0;
  spec.speed_jitter = 0.0;
  auto syn = generate_synthetic(spec, 5);
  const auto& cls = syn->classes();
  int a = -1;
  for (std::size_t i = 0; i < cls.size(); ++i)
    if (cls[i].partner >= 0 && !cls[i].reversed) a = static_cast<int>(i);
  ASSERT_GE(a, 0);
  const int b = cls[static_cast<std::size_t>(a)].partner;
  const Video va = syn->render(a, 0), vb = syn->render(b, 0);
  ASSERT_EQ(va.frames.size(), vb.frames.size());
  const std::size_t n = va.frames.size();
  // same multiset of frames, replayed in opposite order
  std::multiset<std::vector<float>> fa, fb;
  for (std::size_t i = 0; i < n; ++i) {
    fa.insert(va.frames[i].pixels);
    fb.insert(vb.frames[i].pixels);
  }
  EXPECT_EQ(fa, fb);
  EXPECT_NE(va.frames.front(), vb.frames.front());
}

TEST(Synthetic, DegenerateSpecRejected) {
  SyntheticSpec spec;
  spec.objects_per_class = 1;
  spec.motion_phases = 1;
  spec.train_classes = 100;
  EXPECT_THROW(generate_synthetic(spec, 1), DataError);
}

TEST(StubEncoders, ShapesDeterminismAndSensitivity) {
  encoders::EncoderConfig cfg;
  auto enc = encoders::make_encoders(cfg);
  std::mt19937_64 rng(3);
  auto clip = random_clip(rng, 8, 32);
  const auto a = enc.visual->encode(clip), b = enc.visual->encode(clip);
  EXPECT_EQ(a.frames.values.rows(), 8);
  EXPECT_EQ(a.frames.values.cols(), 32);
  ASSERT_EQ(a.patches.frames.size(), 8u);
  EXPECT_EQ(a.patches.frames[0].rows(), 16);
  EXPECT_EQ(a.patches.frames[0].cols(), 32);
  EXPECT_EQ(a.frames.values, b.frames.values);
  EXPECT_TRUE(a.frames.values.allFinite());
  auto other = clip;
  other.frames[2].at(5, 5, 1) += 0.5f;
  const auto c = enc.visual->encode(other);
  EXPECT_GT((c.frames.values - a.frames.values).cwiseAbs().maxCoeff(), 0.0);

  auto hashed_cfg = cfg;
  hashed_cfg.stub_mode = encoders::StubVisualMode::Hash;
  auto hashed = encoders::make_encoders(hashed_cfg);
  const auto h1 = hashed.visual->encode(clip), h2 = hashed.visual->encode(other);
  EXPECT_GT((h1.frames.values - h2.frames.values).cwiseAbs().maxCoeff(), 0.0);

  clip.frames.pop_back();
  EXPECT_THROW(enc.visual->encode(clip), ShapeError);
  auto bad = random_clip(rng, 8, 32);
  bad.frames[0].pixels[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(enc.visual->encode(bad), DataError);
}

TEST(StubEncoders, TextUnitNormDeterministicDistinct) {
  encoders::StubTextEncoder text(32, 1);
  const RowVec a = text.encode("drink"), b = text.encode("drink"), r = text.encode("run");
  EXPECT_EQ(a, b);
  EXPECT_NEAR(a.norm(), 1.0, 1e-6);
  EXPECT_LT(a.dot(r), 0.99);
  EXPECT_THROW(text.encode(""), Error);
}
