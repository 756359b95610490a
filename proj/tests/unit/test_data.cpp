#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <set>

#include "pixeldino/batches.hpp"
#include "pixeldino/errors.hpp"
#include "pixeldino/patches.hpp"
#include "pixeldino/synthetic.hpp"
#include "pixeldino/tile.hpp"
#include "support.hpp"

namespace pixeldino {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

// 4-connected component areas of a square mask.
std::vector<int64_t> component_areas(const std::vector<uint8_t>& mask, int64_t n) {
  std::vector<uint8_t> seen(mask.size(), 0);
  std::vector<int64_t> areas;
  for (int64_t start = 0; start < n * n; ++start) {
    if (!mask[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
    std::vector<int64_t> stack{start};
    seen[static_cast<size_t>(start)] = 1;
    int64_t area = 0;
    while (!stack.empty()) {
      const int64_t p = stack.back();
      stack.pop_back();
      ++area;
      const int64_t x = p % n, y = p / n;
      const int64_t nb[4][2] = {{x + 1, y}, {x - 1, y}, {x, y + 1}, {x, y - 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[1] < 0 || q[0] >= n || q[1] >= n) continue;
        const size_t j = static_cast<size_t>(q[1] * n + q[0]);
        if (mask[j] && !seen[j]) {
          seen[j] = 1;
          stack.push_back(static_cast<int64_t>(j));
        }
      }
    }
    areas.push_back(area);
  }
  return areas;
}

Tile make_tile(const std::string& id, int64_t w, int64_t h, int64_t c, bool labelled, float base = 0.0f) {
  Tile t;
  t.id = id;
  t.width = w;
  t.height = h;
  t.channels = c;
  t.data.resize(static_cast<size_t>(w * h * c));
  for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = base + static_cast<float>(i % 97) * 0.01f;
  if (labelled) {
    t.mask.resize(static_cast<size_t>(w * h));
    for (size_t i = 0; i < t.mask.size(); ++i) t.mask[i] = (i % 13) == 0 ? 1 : 0;
  }
  return t;
}

Manifest manifest_for(const std::string& store, const std::string& provenance) {
  Manifest m;
  m.store = store;
  m.provenance = provenance;
  return m;
}

TEST(Synthetic, DefaultTargetDensity) {
  SyntheticConfig c;
  c.seed = 21;
  const auto tiles = synthesize_split(c, SyntheticSplit::kLabelled, 10);
  int64_t fg = 0, total = 0;
  for (const auto& t : tiles) {
    fg += std::accumulate(t.mask.begin(), t.mask.end(), int64_t{0});
    total += t.plane();
  }
  EXPECT_NEAR(static_cast<double>(fg) / static_cast<double>(total), 0.007, 0.003);
}

TEST(Synthetic, ComponentsRespectAreaBounds) {
  SyntheticConfig c;
  c.seed = 22;
  c.target_density = 0.02;
  for (SyntheticSplit split : {SyntheticSplit::kLabelled, SyntheticSplit::kEval}) {
    for (const auto& t : synthesize_split(c, split, 6)) {
      for (int64_t a : component_areas(t.mask, t.width)) {
        EXPECT_GE(a, c.target_area_min) << t.id;
        EXPECT_LE(a, c.target_area_max) << t.id;
      }
    }
  }
}

TEST(Synthetic, StoresAreBitwiseReproducible) {
  TempDir a("syn_a"), b("syn_b");
  const GeneratedStores sa = testing::generate_tiny(a.path(), 9);
  const GeneratedStores sb = testing::generate_tiny(b.path(), 9);
  for (const auto& [x, y] : {std::pair{sa.labelled, sb.labelled}, {sa.unlabelled, sb.unlabelled},
                             {sa.eval, sb.eval}, {sa.eval_in, sb.eval_in}}) {
    for (const auto& e : fs::directory_iterator(x)) {
      EXPECT_EQ(read_file(e.path()), read_file(y / e.path().filename())) << e.path();
    }
  }
}

TEST(Synthetic, DifferentSeedsDiffer) {
  SyntheticConfig c = testing::tiny_synthetic(1);
  const auto a = synthesize_split(c, SyntheticSplit::kLabelled, 1);
  c.seed = 2;
  const auto b = synthesize_split(c, SyntheticSplit::kLabelled, 1);
  EXPECT_NE(a[0].data, b[0].data);
}

TEST(Synthetic, ShiftedSplitsDifferInBackgroundStatistics) {
  SyntheticConfig c = testing::tiny_synthetic(4);
  c.tile_size = 96;
  const Normalization base = compute_normalization(synthesize_split(c, SyntheticSplit::kEvalIn, 6), "x");
  const Normalization shifted = compute_normalization(synthesize_split(c, SyntheticSplit::kEval, 6), "x");
  double d = 0.0;
  for (size_t i = 0; i < base.mean.size(); ++i) d += std::abs(base.mean[i] - shifted.mean[i]);
  EXPECT_GT(d, 0.01);
}

TEST(Synthetic, StoresCarryProvenanceAndLabelledNormalisation) {
  TempDir dir("syn_prov");
  const GeneratedStores s = testing::generate_tiny(dir.path());
  const TileStore lab = TileStore::open(s.labelled), un = TileStore::open(s.unlabelled);
  const TileStore ev = TileStore::open(s.eval), ev_in = TileStore::open(s.eval_in);
  EXPECT_EQ(lab.manifest().provenance, "labelled");
  EXPECT_EQ(un.manifest().provenance, "unlabelled");
  EXPECT_EQ(ev.manifest().provenance, "eval");
  EXPECT_EQ(ev_in.manifest().provenance, "eval");
  for (const auto& t : lab.tiles()) EXPECT_TRUE(t.has_mask());
  for (const auto& t : un.tiles()) EXPECT_FALSE(t.has_mask());
  for (const auto& t : ev.tiles()) EXPECT_TRUE(t.has_mask());
  const Normalization direct = compute_normalization(lab.tiles(), "labelled");
  for (const TileStore* st : {&lab, &un, &ev, &ev_in}) {
    EXPECT_EQ(st->manifest().normalization.mean, direct.mean);
    EXPECT_EQ(st->manifest().normalization.stddev, direct.stddev);
  }
  std::set<std::string> ids;
  for (const TileStore* st : {&lab, &un, &ev, &ev_in}) {
    for (const auto& t : st->tiles()) EXPECT_TRUE(ids.insert(t.id).second) << t.id;
  }
}

TEST(Synthetic, InvalidDensityRaisesConfigError) {
  SyntheticConfig c;
  c.target_density = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.target_density = 0.2;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TileFormat, RoundTripPreservesEverything) {
  TempDir dir("tile_rt");
  Tile t = make_tile("a", 7, 5, 3, true);
  t.data[4] = std::nanf("");
  write_tile(dir / "a.rtstile", t);
  const Tile r = read_tile(dir / "a.rtstile");
  EXPECT_EQ(r.id, "a");
  EXPECT_EQ(r.width, 7);
  EXPECT_EQ(r.height, 5);
  EXPECT_EQ(r.channels, 3);
  EXPECT_EQ(r.mask, t.mask);
  ASSERT_EQ(r.data.size(), t.data.size());
  EXPECT_TRUE(std::isnan(r.data[4]));
  for (size_t i = 0; i < t.data.size(); ++i) {
    if (i != 4) {
      EXPECT_EQ(r.data[i], t.data[i]);
    }
  }
}

TEST(TileFormat, TruncatedAndCorruptFilesRaiseIoError) {
  TempDir dir("tile_bad");
  write_tile(dir / "a.rtstile", make_tile("a", 4, 4, 2, false));
  const std::string bytes = read_file(dir / "a.rtstile");
  testing::write_text(dir / "short.rtstile", bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tile(dir / "short.rtstile"), IoError);
  std::string bad = bytes;
  bad[0] = 'X';
  testing::write_text(dir / "magic.rtstile", bad);
  EXPECT_THROW(read_tile(dir / "magic.rtstile"), IoError);
  EXPECT_THROW(read_tile(dir / "missing.rtstile"), IoError);
}

TEST(TileStoreCheck, MaskPresenceMustMatchManifest) {
  TempDir dir("store_flag");
  TileStore::create(dir.path(), manifest_for("s", "labelled"), {make_tile("a", 8, 8, 2, true)});
  write_tile(dir / "a.rtstile", make_tile("a", 8, 8, 2, false));
  EXPECT_THROW(TileStore::open(dir.path()), IoError);
}

TEST(TileStoreCheck, EmptyLabelledStoreRaisesConfigError) {
  TempDir dir("store_empty");
  const TileStore empty = TileStore::create(dir / "lab", manifest_for("lab", "labelled"), {});
  BatchSettings bs;
  bs.batch_size_unlabelled = 0;
  EXPECT_THROW(BatchSource(&empty, nullptr, Normalization{}, bs), ConfigError);
}

TEST(TileStoreCheck, LabelledAndUnlabelledMustHaveDistinctProvenance) {
  TempDir dir("store_prov");
  const TileStore lab = TileStore::create(dir / "lab", manifest_for("lab", "labelled"), {make_tile("a", 16, 16, 2, true)});
  const TileStore same = TileStore::create(dir / "lab2", manifest_for("lab2", "labelled"), {make_tile("b", 16, 16, 2, false)});
  const Normalization norm = compute_normalization(lab.tiles(), "lab");
  BatchSettings bs;
  bs.patch_size = 8;
  bs.batch_size_labelled = 1;
  bs.batch_size_unlabelled = 1;
  EXPECT_THROW(BatchSource(&lab, &same, norm, bs), ConfigError);
  EXPECT_THROW(BatchSource(&lab, &lab, norm, bs), ConfigError);
}

TEST(Normalisation, MatchesClosedForm) {
  Tile a = make_tile("a", 2, 1, 1, false), b = make_tile("b", 2, 1, 1, false);
  a.data = {1.0f, 3.0f};
  b.data = {5.0f, 7.0f};
  const Normalization n = compute_normalization({a, b}, "x");
  EXPECT_DOUBLE_EQ(n.mean[0], 4.0);
  EXPECT_NEAR(n.stddev[0], std::sqrt(5.0), 1e-12);
}

TEST(Patches, SmallTileSkippedWithWarning) {
  TempDir dir("small_tile");
  const TileStore st = TileStore::create(dir.path(), manifest_for("s", "labelled"),
                                         {make_tile("big", 32, 32, 2, true), make_tile("small", 16, 40, 2, true)});
  ::testing::internal::CaptureStderr();
  const auto e = eligible_tiles(st, 24);
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(e, (std::vector<int64_t>{0}));
  EXPECT_NE(err.find("small"), std::string::npos) << err;
}

TEST(Patches, GridCoversTileExactly) {
  TempDir dir("grid");
  const TileStore st = TileStore::create(dir.path(), manifest_for("s", "eval"), {make_tile("t", 384, 384, 1, true)});
  PatchSpec spec;
  spec.patch_size = 192;
  const auto g = grid_origins(st, spec);
  ASSERT_EQ(g.size(), 4u);
  std::vector<int> cover(384 * 384, 0);
  for (const auto& o : g) {
    for (int64_t y = o.y0; y < o.y0 + 192; ++y)
      for (int64_t x = o.x0; x < o.x0 + 192; ++x) ++cover[static_cast<size_t>(y * 384 + x)];
  }
  for (int c : cover) ASSERT_EQ(c, 1);
  EXPECT_EQ(g, grid_origins(st, spec));
  EXPECT_EQ(g[1], (PatchOrigin{0, 192, 0}));
}

TEST(Patches, GridLeavesRemainderStrips) {
  TempDir dir("grid_rem");
  const TileStore st = TileStore::create(dir.path(), manifest_for("s", "eval"), {make_tile("t", 50, 40, 1, true)});
  PatchSpec spec;
  spec.patch_size = 16;
  EXPECT_EQ(grid_origins(st, spec).size(), 6u);
}

TEST(Patches, PatchSizeMustBeMultipleOfModelStride) {
  PatchSpec spec;
  spec.patch_size = 100;
  EXPECT_THROW(spec.validate(8), ConfigError);
  spec.patch_size = 96;
  EXPECT_NO_THROW(spec.validate(8));
}

TEST(Patches, CropNormalisesPerChannel) {
  Tile t = make_tile("t", 4, 4, 2, true);
  Normalization n;
  n.mean = {0.1, 0.2};
  n.stddev = {2.0, 0.5};
  const RasterPatch p = crop_patch(t, 0, 1, 2, 2, n);
  EXPECT_NEAR(p.image[0], (t.data[2 * 4 + 1] - 0.1) / 2.0, 1e-6);
  EXPECT_NEAR(p.image[4 + 3], (t.data[16 + 3 * 4 + 2] - 0.2) / 0.5, 1e-6);
  EXPECT_EQ(p.mask[1], t.mask[2 * 4 + 2]);
  EXPECT_THROW(crop_patch(t, 0, 3, 3, 2, n), DimensionError);
}

// Crops oversample tile centres, so the check uses tiles much larger than the
// patch to keep that bias below the tolerance.
TEST(PatchDraws, NormalisedPatchesHaveZeroMean) {
  TempDir dir("norm_mean");
  SyntheticConfig c = testing::tiny_synthetic(31);
  c.tile_size = 192;
  c.labelled_tiles = 6;
  c.unlabelled_tiles = c.eval_tiles = c.eval_in_tiles = 0;
  const GeneratedStores g = generate_synthetic(c, dir.path());
  const TileStore lab = TileStore::open(g.labelled);
  BatchSettings s;
  s.patch_size = 16;
  s.batch_size_labelled = 10;
  s.batch_size_unlabelled = 0;
  s.augment_labelled = false;
  s.seed = 3;
  const BatchSource src(&lab, nullptr, lab.manifest().normalization, s);
  const int64_t ch = lab.channels(), plane = 16 * 16;
  std::vector<double> sum(static_cast<size_t>(ch), 0.0);
  double n = 0;
  for (int64_t step = 0; step < 100; ++step) {
    const LabelledBatch b = src.make_labelled(step);
    for (int64_t i = 0; i < 10; ++i)
      for (int64_t k = 0; k < ch; ++k)
        for (int64_t p = 0; p < plane; ++p) sum[static_cast<size_t>(k)] += b.images.data()[static_cast<size_t>((i * ch + k) * plane + p)];
    n += static_cast<double>(10 * plane);
  }
  for (double v : sum) EXPECT_NEAR(v / n, 0.0, 0.05);
}

class BatchTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("batches");
    stores_ = testing::generate_tiny(dir_->path(), 13);
    lab_ = new TileStore(TileStore::open(stores_.labelled));
    un_ = new TileStore(TileStore::open(stores_.unlabelled));
  }
  static void TearDownTestSuite() {
    delete lab_;
    delete un_;
    delete dir_;
  }
  static BatchSettings settings(bool unlabelled = true) {
    BatchSettings s;
    s.patch_size = 16;
    s.batch_size_labelled = 4;
    s.batch_size_unlabelled = unlabelled ? 3 : 0;
    s.seed = 77;
    return s;
  }
  static inline TempDir* dir_ = nullptr;
  static inline GeneratedStores stores_;
  static inline TileStore* lab_ = nullptr;
  static inline TileStore* un_ = nullptr;
};

TEST_F(BatchTest, DrawSequenceIsReproducible) {
  const BatchSource a(lab_, un_, lab_->manifest().normalization, settings());
  const BatchSource b(lab_, un_, lab_->manifest().normalization, settings());
  for (int64_t step : {0, 1, 17, 3}) {
    const StepBatch x = a.make(step), y = b.make(step);
    EXPECT_EQ(x.labelled.origins, y.labelled.origins);
    EXPECT_EQ(x.unlabelled.origins, y.unlabelled.origins);
    EXPECT_EQ(testing::values(x.labelled.images), testing::values(y.labelled.images));
    EXPECT_EQ(testing::values(x.unlabelled.weak_images), testing::values(y.unlabelled.weak_images));
  }
  EXPECT_NE(a.make(0).labelled.origins, a.make(1).labelled.origins);
}

TEST_F(BatchTest, OriginsStayInBoundsAndCoverTiles) {
  const BatchSource src(lab_, un_, lab_->manifest().normalization, settings());
  std::set<int64_t> tiles;
  for (int64_t step = 0; step < 100; ++step) {
    for (const auto& o : src.make_labelled(step).origins) {
      const Tile& t = lab_->tiles()[static_cast<size_t>(o.tile_index)];
      ASSERT_GE(o.x0, 0);
      ASSERT_LE(o.x0 + 16, t.width);
      ASSERT_LE(o.y0 + 16, t.height);
      tiles.insert(o.tile_index);
    }
  }
  EXPECT_EQ(tiles.size(), lab_->size());
}

TEST_F(BatchTest, SupervisedModeLeavesUnlabelledStoreUntouched) {
  const BatchSource src(lab_, nullptr, lab_->manifest().normalization, settings(false));
  const StepBatch b = src.make(5);
  EXPECT_TRUE(b.unlabelled.empty());
  EXPECT_FALSE(b.unlabelled.weak_images.defined());
  // Labelled draws do not depend on whether unlabelled draws happen.
  const BatchSource semi(lab_, un_, lab_->manifest().normalization, settings(true));
  EXPECT_EQ(testing::values(semi.make(5).labelled.images), testing::values(b.labelled.images));
}

TEST_F(BatchTest, LabelledMaskMatchesTransportedTile) {
  BatchSettings s = settings(false);
  s.augment_labelled = false;
  const BatchSource src(lab_, nullptr, lab_->manifest().normalization, s);
  const LabelledBatch b = src.make_labelled(2);
  for (size_t i = 0; i < b.origins.size(); ++i) {
    const auto& o = b.origins[i];
    const Tile& t = lab_->tiles()[static_cast<size_t>(o.tile_index)];
    for (int64_t y = 0; y < 16; ++y)
      for (int64_t x = 0; x < 16; ++x)
        ASSERT_EQ(b.mask.data()[i * 256 + static_cast<size_t>(y * 16 + x)],
                  static_cast<float>(t.mask[static_cast<size_t>((o.y0 + y) * t.width + o.x0 + x)]));
  }
  for (float v : b.valid.data()) EXPECT_EQ(v, 1.0f);
}

TEST_F(BatchTest, UnlabelledBatchHoldsWeakViewAndStrongDraws) {
  const BatchSource src(lab_, un_, lab_->manifest().normalization, settings());
  const UnlabelledBatch b = src.make_unlabelled(4);
  ASSERT_EQ(b.weak.size(), 3u);
  EXPECT_EQ(b.strong.size(), 3u);
  EXPECT_EQ(b.weak_images.shape(), (Shape{3, un_->channels(), 16, 16}));
  for (size_t i = 0; i < b.weak.size(); ++i) EXPECT_EQ(b.weak[i].label_kind, LabelKind::kNone);
}

TEST_F(BatchTest, ThreadedIteratorMatchesInline) {
  const BatchSource src(lab_, un_, lab_->manifest().normalization, settings());
  BatchIterator inline_it(src, 3, 15, 4, 0);
  BatchIterator threaded(src, 3, 15, 2, 3);
  int64_t expect_step = 3;
  while (auto a = inline_it.next()) {
    auto b = threaded.next();
    ASSERT_TRUE(b.has_value());
    EXPECT_EQ(a->step, expect_step);
    EXPECT_EQ(b->step, expect_step);
    EXPECT_EQ(testing::values(a->labelled.images), testing::values(b->labelled.images));
    EXPECT_EQ(testing::values(a->unlabelled.weak_images), testing::values(b->unlabelled.weak_images));
    ++expect_step;
  }
  EXPECT_EQ(expect_step, 15);
  EXPECT_FALSE(threaded.next().has_value());
}

TEST_F(BatchTest, IteratorPropagatesBuildErrors) {
  Normalization wrong;
  wrong.mean = {0.0};
  wrong.stddev = {1.0};
  const BatchSource src(lab_, nullptr, wrong, settings(false));
  BatchIterator threaded(src, 0, 4, 2, 2);
  EXPECT_THROW(threaded.next(), DimensionError);
  BatchIterator inline_it(src, 0, 4, 2, 0);
  EXPECT_THROW(inline_it.next(), DimensionError);
}

TEST_F(BatchTest, IteratorDestroyedEarlyJoinsCleanly) {
  const BatchSource src(lab_, un_, lab_->manifest().normalization, settings());
  BatchIterator it(src, 0, 1000, 3, 2);
  EXPECT_TRUE(it.next().has_value());
}

}  // namespace
}  // namespace pixeldino
