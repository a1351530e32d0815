#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "quadgate/rng.hpp"
#include "quadgate/transmix.hpp"

using namespace qg;

namespace {

Tensor random_image(int side, Rng& rng) {
  Tensor t = Tensor::zeros({1, side, side});
  for (double& v : t.values()) v = rng.uniform(0.0, 1.0);
  return t;
}

Sample make_sample(int side, double score, const std::string& id, Rng& rng) {
  return Sample{random_image(side, rng), score, id};
}

// Provider returning uniform attention over a 2x2 grid.
AttentionProvider uniform_attention_2x2() {
  return [](const Tensor&) {
    return std::make_pair(std::vector<double>(4, 0.25), std::make_pair(2, 2));
  };
}

}  // namespace

TEST_CASE("cut mask sampling is seeded, bounded and rectangular") {
  Rng a(5), b(5);
  CutMask m1 = sample_cut_mask(64, 64, a);
  CutMask m2 = sample_cut_mask(64, 64, b);
  CHECK(m1.y0 == m2.y0);
  CHECK(m1.x0 == m2.x0);
  CHECK(m1.rh == m2.rh);
  CHECK(m1.rw == m2.rw);

  Rng rng(9);
  for (int trial = 0; trial < 500; ++trial) {
    int h = 8 + static_cast<int>(rng.next() % 120);
    int w = 8 + static_cast<int>(rng.next() % 120);
    CutMask m = sample_cut_mask(h, w, rng);
    CHECK(m.area_fraction() >= 0.05);
    CHECK(m.area_fraction() <= 0.5);
    CHECK(m.y0 >= 0);
    CHECK(m.x0 >= 0);
    CHECK(m.y0 + m.rh <= h);
    CHECK(m.x0 + m.rw <= w);
    // every row slice of the 1-region is one interval
    for (int y = 0; y < h; ++y) {
      int transitions = 0;
      bool prev = false;
      for (int x = 0; x < w; ++x) {
        bool cur = m.at(y, x);
        if (cur != prev) ++transitions;
        prev = cur;
      }
      CHECK(transitions <= 2);
    }
  }
  CHECK_THROWS_AS(sample_cut_mask(4, 64, rng), config_error);
}

TEST_CASE("cutmix endpoint masks and swap symmetry") {
  Rng rng(13);
  Tensor a = random_image(16, rng);
  Tensor b = random_image(16, rng);

  CutMask none{16, 16, 0, 0, 0, 0};  // empty rectangle
  CHECK(apply_cutmix(a, b, none).values() == a.values());

  CutMask all{16, 16, 0, 0, 16, 16};
  CHECK(apply_cutmix(a, b, all).values() == b.values());

  // apply(A,B,M) == apply(B,A,1-M) for a rectangle and its complement is not
  // a rectangle; check the swap identity pixelwise instead.
  Rng mrng(17);
  CutMask m = sample_cut_mask(16, 16, mrng);
  Tensor ab = apply_cutmix(a, b, m);
  Tensor ba = apply_cutmix(b, a, m);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      std::size_t i = static_cast<std::size_t>(y) * 16 + x;
      if (m.at(y, x)) {
        CHECK(ab.values()[i] == b.values()[i]);
        CHECK(ba.values()[i] == a.values()[i]);
      } else {
        CHECK(ab.values()[i] == a.values()[i]);
        CHECK(ba.values()[i] == b.values()[i]);
      }
    }
  }

  CHECK_THROWS_AS(apply_cutmix(a, random_image(8, rng), m), dim_error);
}

TEST_CASE("lambda endpoints and the hand-computed quarter case") {
  std::vector<double> att{0.25, 0.25, 0.25, 0.25};

  CutMask none{64, 64, 0, 0, 0, 0};
  CHECK(compute_lambda(att, none, 2, 2) == 0.0);

  CutMask all{64, 64, 0, 0, 64, 64};
  CHECK(compute_lambda(att, all, 2, 2) == 1.0);

  // mask covering exactly the top-left 32x32 cell: the 2x2 grid centers are
  // (16,16), (16,48), (48,16), (48,48); only the first falls inside, so
  // lambda = 0.25 under uniform attention.
  CutMask quarter{64, 64, 0, 0, 32, 32};
  CHECK(compute_lambda(att, quarter, 2, 2) == 0.25);

  // attention concentrated on the masked cell drives lambda to 1
  CHECK(compute_lambda({1, 0, 0, 0}, quarter, 2, 2) == 1.0);
  CHECK(compute_lambda({0, 1, 0, 0}, quarter, 2, 2) == 0.0);

  CHECK_THROWS_AS(compute_lambda({0.5, 0.5}, quarter, 2, 2), dim_error);
}

TEST_CASE("downsampled mask uses the cell-center pixel") {
  // 4x4 mask over a 2x2 grid: centers at (1,1),(1,3),(3,1),(3,3)
  CutMask m{4, 4, 0, 0, 2, 2};  // top-left 2x2 rectangle
  auto cells = downsample_mask(m, 2, 2);
  CHECK(cells == std::vector<double>{1, 0, 0, 0});

  CutMask shifted{4, 4, 1, 1, 2, 2};  // covers (1..2, 1..2): only center (1,1)
  auto cells2 = downsample_mask(shifted, 2, 2);
  CHECK(cells2 == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("mixed score is the convex relabeling") {
  CHECK(mixed_score(2.0, 6.0, 0.0) == 2.0);
  CHECK(mixed_score(2.0, 6.0, 1.0) == 6.0);
  CHECK(mixed_score(2.0, 6.0, 0.3) == doctest::Approx(3.2).epsilon(1e-15));
  // monotone in lambda
  double prev = -1;
  for (double l = 0; l <= 1.0; l += 0.125) {
    double y = mixed_score(2.0, 6.0, l);
    CHECK(y > prev);
    prev = y;
  }
  CHECK_THROWS_AS(mixed_score(1, 2, 1.5), contract_error);
  CHECK_THROWS_AS(mixed_score(1, 2, -0.1), contract_error);
}

TEST_CASE("eligibility thresholds per modality") {
  EligibilityRule ge{Modality::ge};
  CHECK(ge.eligible(3.0));
  CHECK(ge.eligible(4.0));
  CHECK_FALSE(ge.eligible(5.0));

  EligibilityRule lo{Modality::lo};
  CHECK(lo.eligible(1.5));
  CHECK(lo.eligible(7.0));
  CHECK_FALSE(lo.eligible(2.0));
  CHECK_FALSE(lo.eligible(4.0));
  CHECK_FALSE(lo.eligible(6.0));

  EligibilityRule cip{Modality::cip};
  CHECK(cip.eligible(15.0));
  CHECK_FALSE(cip.eligible(0.0));
  CHECK_FALSE(cip.eligible(10.0));
}

TEST_CASE("conditional transmix replaces eligible anchors only") {
  Rng rng(19);
  std::vector<Sample> batch{
      make_sample(16, 30.0, "a", rng),  // eligible (cip > 10)
      make_sample(16, 2.0, "b", rng),   // not eligible
      make_sample(16, 55.0, "c", rng),  // eligible
  };
  EligibilityRule rule{Modality::cip};
  int provider_calls = 0;
  AttentionProvider provider = [&](const Tensor& img) {
    ++provider_calls;
    CHECK(img.shape() == std::vector<int>{1, 16, 16});
    return std::make_pair(std::vector<double>(4, 0.25), std::make_pair(2, 2));
  };

  auto out = conditional_transmix(batch, rule, provider, 123);
  REQUIRE(out.size() == 3);
  CHECK(provider_calls == 2);  // one forward per eligible anchor, on the mixed image

  // ineligible sample passes through bit-exactly
  CHECK(out[1].image.values() == batch[1].image.values());
  CHECK(out[1].score == batch[1].score);

  // replaced anchors carry a convex relabeling
  for (int i : {0, 2}) {
    double lo = std::min(batch[static_cast<std::size_t>(i)].score, 2.0);
    double lo2 = std::min({batch[0].score, batch[1].score, batch[2].score});
    double hi = std::max({batch[0].score, batch[1].score, batch[2].score});
    (void)lo;
    CHECK(out[static_cast<std::size_t>(i)].score >= lo2);
    CHECK(out[static_cast<std::size_t>(i)].score <= hi);
    CHECK(out[static_cast<std::size_t>(i)].image.values() !=
          batch[static_cast<std::size_t>(i)].image.values());
  }

  // seeded rerun is bit-identical
  auto again = conditional_transmix(batch, rule, uniform_attention_2x2(), 123);
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i].image.values() == again[i].image.values());
    CHECK(out[i].score == again[i].score);
  }
}

TEST_CASE("single-sample batches pass through unchanged") {
  Rng rng(23);
  std::vector<Sample> batch{make_sample(16, 50.0, "only", rng)};
  auto out = conditional_transmix(batch, EligibilityRule{Modality::cip},
                                  uniform_attention_2x2(), 7);
  CHECK(out[0].image.values() == batch[0].image.values());
  CHECK(out[0].score == batch[0].score);
}

TEST_CASE("uniform attention reduces lambda to the masked patch fraction") {
  Rng rng(29);
  for (int trial = 0; trial < 2000; ++trial) {
    int gh = 2 + static_cast<int>(rng.next() % 7);
    int gw = 2 + static_cast<int>(rng.next() % 7);
    int h = gh * (4 + static_cast<int>(rng.next() % 13));
    int w = gw * (4 + static_cast<int>(rng.next() % 13));
    if (h < 8 || w < 8) continue;
    CutMask m = sample_cut_mask(h, w, rng);
    std::vector<double> att(static_cast<std::size_t>(gh) * gw,
                            1.0 / (static_cast<double>(gh) * gw));
    auto cells = downsample_mask(m, gh, gw);
    double masked_cells = 0;
    for (double c : cells) masked_cells += c;
    double expect = masked_cells / (static_cast<double>(gh) * gw);
    double lambda = compute_lambda(att, m, gh, gw);
    CHECK(std::fabs(lambda - expect) < 1e-12);
  }
}

TEST_CASE("randomized lambda and relabeling invariants") {
  Rng rng(31);
  for (int trial = 0; trial < 2000; ++trial) {
    int gh = 1 + static_cast<int>(rng.next() % 8);
    int gw = 1 + static_cast<int>(rng.next() % 8);
    int h = std::max(8, gh * (2 + static_cast<int>(rng.next() % 10)));
    int w = std::max(8, gw * (2 + static_cast<int>(rng.next() % 10)));
    CutMask m = sample_cut_mask(h, w, rng);
    // random normalized attention
    std::vector<double> att(static_cast<std::size_t>(gh) * gw);
    double sum = 0;
    for (double& a : att) {
      a = rng.uniform(0, 1);
      sum += a;
    }
    for (double& a : att) a /= sum;
    double lambda = compute_lambda(att, m, gh, gw);
    CHECK(lambda >= 0.0);
    CHECK(lambda <= 1.0);
    double ya = rng.uniform(0, 100), yb = rng.uniform(0, 100);
    double mixed = mixed_score(ya, yb, lambda);
    CHECK(mixed >= std::min(ya, yb) - 1e-12);
    CHECK(mixed <= std::max(ya, yb) + 1e-12);
  }
}

TEST_CASE("score histogram counts nearest levels") {
  Rng rng(37);
  std::vector<Sample> data{
      {random_image(8, rng), 0.0, "a"},
      {random_image(8, rng), 0.0, "b"},
      {random_image(8, rng), 8.0, "c"},
  };
  auto counts = score_histogram(data, Modality::ge);
  REQUIRE(counts.size() == 17);
  CHECK(counts[0] == 2);
  CHECK(counts[16] == 1);
  long total = 0;
  for (long c : counts) total += c;
  CHECK(total == 3);

  CHECK(score_histogram({}, Modality::cip).size() == 101);

  std::vector<Sample> bad{{random_image(8, rng), 9.0, "x"}};
  CHECK_THROWS_AS(score_histogram(bad, Modality::ge), contract_error);
}
