#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "act/backbone.hpp"
#include "act/foundation.hpp"
#include "act/losses.hpp"
#include "grad_check.hpp"

using act::Rng;
using act::Shape;
using DTensor = act::TensorT<double>;
using DTape = act::TapeT<double>;
using DStore = act::ParamStoreT<double>;

namespace {

act::PatchSetT<double> toy_patches(Rng& rng, int64_t n_pts, int64_t n_groups, int64_t k) {
  act::CloudT<double> pts;
  for (int64_t i = 0; i < n_pts; ++i)
    pts.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  return act::make_patches(pts, n_groups, k);
}

}  // namespace

TEST(PatchEmbed, PermutationInvariantWithinNeighborhood) {
  Rng rng(1);
  DStore ps;
  auto embed = act::PatchEmbedT<double>::create(ps, "embed", 16, rng);
  auto patches = toy_patches(rng, 32, 4, 6);

  DTape t1;
  auto tok1 = embed.forward(t1, patches);

  // reverse the points of neighborhood 2
  auto shuffled = patches;
  for (int64_t j = 0; j < 6; ++j)
    for (int d = 0; d < 3; ++d)
      shuffled.rel[static_cast<size_t>((2 * 6 + j) * 3 + d)] =
          patches.rel[static_cast<size_t>((2 * 6 + (5 - j)) * 3 + d)];
  DTape t2;
  auto tok2 = embed.forward(t2, shuffled);
  EXPECT_EQ(tok1.v(), tok2.v());
}

TEST(PatchEmbed, SinglePointPoolAndDuplicateNeighborhood) {
  Rng rng(2);
  DStore ps;
  auto embed = act::PatchEmbedT<double>::create(ps, "embed", 16, rng);

  std::vector<double> rel = {0.3, -0.2, 0.5};
  DTape t1;
  auto tok = embed.forward(t1, rel, 1, 1);
  DTape t2;
  auto direct = embed.mlp.forward(t2, DTensor::from({1, 3}, rel));
  EXPECT_EQ(tok.v(), direct.v());

  std::vector<double> rel2 = {0.3, -0.2, 0.5, 0.3, -0.2, 0.5};
  DTape t3;
  auto two = embed.forward(t3, rel2, 2, 1);
  EXPECT_EQ(two.v()[0], two.v()[16]);
}

TEST(Stack, ZeroResidualBranchesGiveIdentityPlusPos) {
  Rng rng(3);
  DStore ps;
  auto stack = act::TransformerStackT<double>::create(ps, "s", 8, 3, 2, 0.0, rng);
  for (auto& e : ps.entries()) {
    if (e.name.find(".attn.proj") != std::string::npos ||
        e.name.find(".mlp.fc2") != std::string::npos) {
      std::fill(e.tensor.v().begin(), e.tensor.v().end(), 0.0);
    }
  }
  DTape tape;
  auto tokens = act_test::rand_tensor({4, 8}, rng, 1.0, false);
  auto pos = act_test::rand_tensor({4, 8}, rng, 1.0, false);
  auto cls_pos = act_test::rand_tensor({1, 8}, rng, 1.0, false);
  auto out = stack.encode(tape, tokens, pos, cls_pos);
  ASSERT_EQ(out.shape(), (Shape{5, 8}));
  for (int64_t j = 0; j < 8; ++j) {
    EXPECT_NEAR(out.v()[static_cast<size_t>(j)],
                stack.cls_token.v()[static_cast<size_t>(j)] + cls_pos.v()[static_cast<size_t>(j)], 1e-12);
  }
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 8; ++j) {
      EXPECT_NEAR(out.v()[static_cast<size_t>((i + 1) * 8 + j)],
                  tokens.v()[static_cast<size_t>(i * 8 + j)] + pos.v()[static_cast<size_t>(i * 8 + j)], 1e-12);
    }
}

TEST(Stack, TokenPermutationEquivariance) {
  Rng rng(4);
  DStore ps;
  auto stack = act::TransformerStackT<double>::create(ps, "s", 8, 2, 2, 0.0, rng);
  auto tokens = act_test::rand_tensor({4, 8}, rng, 1.0, false);
  auto pos = act_test::rand_tensor({4, 8}, rng, 1.0, false);
  auto cls_pos = act_test::rand_tensor({1, 8}, rng, 1.0, false);

  DTape t1;
  auto out = stack.encode(t1, tokens, pos, cls_pos);

  const std::vector<int64_t> perm{2, 0, 3, 1};
  DTape t2;
  auto out_p = stack.encode(t2, t2.gather_rows(tokens, perm), t2.gather_rows(pos, perm),
                            cls_pos);
  for (int64_t j = 0; j < 8; ++j)
    EXPECT_NEAR(out_p.v()[static_cast<size_t>(j)], out.v()[static_cast<size_t>(j)], 1e-9);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 8; ++j) {
      EXPECT_NEAR(out_p.v()[static_cast<size_t>((i + 1) * 8 + j)],
                  out.v()[static_cast<size_t>((perm[static_cast<size_t>(i)] + 1) * 8 + j)], 1e-9);
    }
}

TEST(Prompts, EmptyBankMatchesUnprompted) {
  Rng rng(5);
  DStore ps;
  auto stack = act::TransformerStackT<double>::create(ps, "s", 8, 2, 2, 0.0, rng);
  auto bank = act::PromptBankT<double>::create(ps, "prompts", 2, 0, 8,
                                               act::PromptType::kDeep, rng);
  auto tokens = act_test::rand_tensor({3, 8}, rng, 1.0, false);
  auto pos = act_test::rand_tensor({3, 8}, rng, 1.0, false);
  auto cls_pos = act_test::rand_tensor({1, 8}, rng, 1.0, false);
  DTape t1, t2;
  auto a = stack.encode(t1, tokens, pos, cls_pos, &bank);
  auto b = stack.encode(t2, tokens, pos, cls_pos, nullptr);
  EXPECT_EQ(a.v(), b.v());
}

TEST(Prompts, DeepDiscardsPromptRowsShallowKeepsThem) {
  Rng rng(6);
  DStore ps;
  auto stack = act::TransformerStackT<double>::create(ps, "s", 8, 2, 2, 0.0, rng);
  auto deep = act::PromptBankT<double>::create(ps, "dp", 2, 3, 8, act::PromptType::kDeep, rng);
  auto shallow =
      act::PromptBankT<double>::create(ps, "sp", 2, 3, 8, act::PromptType::kShallow, rng);
  EXPECT_EQ(deep.layers.size(), 2u);
  EXPECT_EQ(shallow.layers.size(), 1u);
  auto tokens = act_test::rand_tensor({4, 8}, rng, 1.0, false);
  auto pos = act_test::rand_tensor({4, 8}, rng, 1.0, false);
  auto cls_pos = act_test::rand_tensor({1, 8}, rng, 1.0, false);
  DTape t1, t2;
  EXPECT_EQ(stack.encode(t1, tokens, pos, cls_pos, &deep).dim(0), 5);
  EXPECT_EQ(stack.encode(t2, tokens, pos, cls_pos, &shallow).dim(0), 8);
}

TEST(Prompts, PromptsChangeTokenOutputs) {
  Rng rng(7);
  DStore ps;
  auto stack = act::TransformerStackT<double>::create(ps, "s", 8, 2, 2, 0.0, rng);
  auto bank = act::PromptBankT<double>::create(ps, "p", 2, 4, 8, act::PromptType::kDeep, rng);
  auto tokens = act_test::rand_tensor({3, 8}, rng, 1.0, false);
  auto pos = act_test::rand_tensor({3, 8}, rng, 1.0, false);
  auto cls_pos = act_test::rand_tensor({1, 8}, rng, 1.0, false);
  DTape t1, t2;
  auto with = stack.encode(t1, tokens, pos, cls_pos, &bank);
  auto without = stack.encode(t2, tokens, pos, cls_pos);
  double diff = 0;
  for (size_t i = 0; i < with.v().size(); ++i) diff += std::fabs(with.v()[i] - without.v()[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Prompts, FrozenStackGradsFlowOnlyToTunableParts) {
  Rng rng(8);
  DStore ps;
  auto embed = act::PatchEmbedT<double>::create(ps, "embed", 8, rng);
  auto pos = act::PosEmbedT<double>::create(ps, "pos", 8, act::PosMode::k3d, rng);
  auto stack = act::TransformerStackT<double>::create(ps, "foundation", 8, 2, 2, 0.0, rng);
  auto bank =
      act::PromptBankT<double>::create(ps, "prompts", 2, 3, 8, act::PromptType::kDeep, rng);
  ps.freeze("foundation.*");

  auto patches = toy_patches(rng, 24, 4, 4);
  DTape tape;
  auto tokens = embed.forward(tape, patches);
  auto pos_t = pos.forward(tape, patches.centroids);
  auto hidden = stack.encode(tape, tokens, pos_t, pos.cls_pos, &bank);
  tape.backward(tape.mean_all(hidden));

  for (const auto& e : ps.entries()) {
    const bool frozen = act::glob_match("foundation.*", e.name);
    bool has_nonzero_grad = false;
    if (e.tensor.has_grad()) {
      for (double g : e.tensor.g())
        if (g != 0.0) has_nonzero_grad = true;
    }
    if (frozen) {
      EXPECT_FALSE(has_nonzero_grad) << e.name;
    } else {
      EXPECT_TRUE(has_nonzero_grad) << e.name;
    }
  }
}

TEST(PosEmbed, NoneModeGivesTranslationInvariance) {
  Rng rng(9);
  DStore ps;
  auto embed = act::PatchEmbedT<double>::create(ps, "embed", 8, rng);
  auto pos_none = act::PosEmbedT<double>::create(ps, "pn", 8, act::PosMode::kNone, rng);
  auto pos_3d = act::PosEmbedT<double>::create(ps, "p3", 8, act::PosMode::k3d, rng);
  auto stack = act::TransformerStackT<double>::create(ps, "s", 8, 2, 2, 0.0, rng);

  auto patches = toy_patches(rng, 24, 4, 4);
  auto shifted = patches;
  for (auto& c : shifted.centroids) {
    c[0] += 0.7;
    c[1] -= 0.4;
    c[2] += 0.1;
  }

  auto run = [&](const act::PatchSetT<double>& p, const act::PosEmbedT<double>& pe) {
    DTape tape;
    auto tokens = embed.forward(tape, p);
    return stack.encode(tape, tokens, pe.forward(tape, p.centroids), pe.cls_pos).v();
  };
  EXPECT_EQ(run(patches, pos_none), run(shifted, pos_none));
  EXPECT_NE(run(patches, pos_3d), run(shifted, pos_3d));

  // 2d-xy ignores pure z translation
  auto zshift = patches;
  for (auto& c : zshift.centroids) c[2] -= 0.9;
  auto pos_2d = act::PosEmbedT<double>::create(ps, "p2", 8, act::PosMode::k2dXy, rng);
  EXPECT_EQ(run(patches, pos_2d), run(zshift, pos_2d));
}

TEST(Backbone, EndToEndFiniteDifference) {
  Rng rng(10);
  DStore ps;
  auto embed = act::PatchEmbedT<double>::create(ps, "embed", 16, rng);
  auto pos = act::PosEmbedT<double>::create(ps, "pos", 16, act::PosMode::k3d, rng);
  auto stack = act::TransformerStackT<double>::create(ps, "stack", 16, 2, 2, 0.0, rng);
  auto bank =
      act::PromptBankT<double>::create(ps, "prompts", 2, 2, 16, act::PromptType::kDeep, rng);
  auto patches = toy_patches(rng, 16, 4, 4);

  auto w = DTensor::zeros({5, 16});
  for (auto& v : w.v()) v = rng.normal();

  std::vector<DTensor> leaves;
  for (const auto& e : ps.entries()) leaves.push_back(e.tensor);

  auto res = act_test::grad_check(
      [&](const std::vector<DTensor>&) {
        DTape tape;
        auto tokens = embed.forward(tape, patches);
        auto hidden = stack.encode(tape, tokens, pos.forward(tape, patches.centroids),
                                   pos.cls_pos, &bank);
        auto loss = tape.sum_all(tape.mul(hidden, w));
        const double v = loss.item();
        tape.backward(loss);
        return v;
      },
      leaves, 1e-4, 1e-3);
  EXPECT_TRUE(res.ok) << res.detail << " worst rel " << res.worst_rel;
}

TEST(EdgeRefine, ShapeAndGraphValidation) {
  Rng rng(11);
  DStore ps;
  auto refine = act::EdgeRefineT<double>::create(ps, "ref", 8, rng);
  DTape tape;
  auto tokens = act_test::rand_tensor({5, 8}, rng, 1.0, false);
  act::CloudT<double> cents;
  for (int i = 0; i < 5; ++i)
    cents.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  auto graph = act::token_graph(cents, 3);
  auto out = refine.forward(tape, tokens, graph);
  EXPECT_EQ(out.shape(), (Shape{5, 8}));
  graph.pop_back();
  EXPECT_THROW(refine.forward(tape, tokens, graph), act::ShapeError);
}

TEST(Surrogate, DeterministicAndLearns) {
  act::FoundationConfig cfg;
  cfg.width = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.steps = 60;
  cfg.batch = 4;
  cfg.seed = 123;
  auto a = act::make_surrogate_foundation<double>(cfg);
  auto b = act::make_surrogate_foundation<double>(cfg);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params.entries()[i].name, b.params.entries()[i].name);
    EXPECT_EQ(a.params.entries()[i].tensor.v(), b.params.entries()[i].tensor.v());
  }
  EXPECT_LT(a.loss_last, a.loss_first);
  for (const auto& e : a.params.entries()) {
    EXPECT_TRUE(act::glob_match("foundation.*", e.name)) << e.name;
  }
}

TEST(Textures, DeterministicAndInRange) {
  Rng r1(5), r2(5);
  for (int i = 0; i < 10; ++i) {
    auto a = act::gen_texture<double>(r1);
    auto b = act::gen_texture<double>(r2);
    EXPECT_EQ(a, b);
    for (double v : a) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
  // patchify: first patch row holds the image's top-left 4x4 block
  auto img = act::gen_texture<double>(r1);
  auto p = act::patchify_image(img);
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x)
      EXPECT_EQ(p[static_cast<size_t>(y * 4 + x)], img[static_cast<size_t>(y * 16 + x)]);
}

TEST(Losses, CosineRowsBoundsAndFd) {
  Rng rng(12);
  // finite differences through the custom op
  auto a = act_test::rand_tensor({4, 6}, rng);
  auto b = act_test::rand_tensor({4, 6}, rng, 1.0, false);
  auto w = DTensor::zeros({4});
  for (auto& v : w.v()) v = rng.normal();
  auto res = act_test::grad_check_tape(
      [b, w](DTape& t, const std::vector<DTensor>& ls) {
        return t.sum_all(t.mul(t.cosine_rows(ls[0], b), w));
      },
      {a});
  EXPECT_TRUE(res.ok) << res.detail;

  // parallel, antiparallel, scaled
  DTape tape;
  auto t = DTensor::from({1, 3}, {0.3, -0.4, 0.5});
  auto same = tape.cosine_rows(t, t);
  EXPECT_NEAR(same.v()[0], 1.0, 1e-5);
  EXPECT_LT(same.v()[0], 1.0);
  auto anti = tape.cosine_rows(DTensor::from({1, 3}, {-0.3, 0.4, -0.5}), t);
  EXPECT_NEAR(anti.v()[0], -1.0, 1e-5);
  EXPECT_GT(anti.v()[0], -1.0);
  auto scaled = tape.cosine_rows(DTensor::from({1, 3}, {0.3e3, -0.4e3, 0.5e3}), t);
  EXPECT_NEAR(scaled.v()[0], same.v()[0], 1e-9);
  auto zero = tape.cosine_rows(DTensor::zeros({1, 3}), t);
  EXPECT_DOUBLE_EQ(zero.v()[0], 0.0);
}

TEST(Losses, ChamferLossMatchesMetricAndFd) {
  Rng rng(13);
  act::CloudT<double> gt;
  for (int i = 0; i < 7; ++i)
    gt.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  auto pred = act_test::rand_tensor({5, 3}, rng);

  DTape tape;
  auto loss = act::chamfer_l1_loss(tape, pred, gt);
  EXPECT_NEAR(loss.item(), act::chamfer_l1(act::detail::tensor_to_cloud(pred), gt), 1e-6);
  auto loss2 = act::chamfer_l2_loss(tape, pred, gt);
  EXPECT_NEAR(loss2.item(), act::chamfer_l2(act::detail::tensor_to_cloud(pred), gt), 1e-9);

  auto res = act_test::grad_check_tape(
      [&gt](DTape& t, const std::vector<DTensor>& ls) {
        return act::chamfer_l1_loss(t, ls[0], gt);
      },
      {pred}, 1e-4, 1e-3);
  EXPECT_TRUE(res.ok) << res.detail << " worst " << res.worst_rel;
}

TEST(Losses, CrossEntropyAndKl) {
  DTape tape;
  // logits hugely favoring the correct label -> CE ~ 0
  auto logits = DTensor::from({2, 3}, {20, 0, 0, 0, 0, 20}, true);
  auto ce = act::cross_entropy_rows(tape, logits, {0, 2});
  EXPECT_NEAR(ce.v()[0], 0.0, 1e-6);
  EXPECT_NEAR(ce.v()[1], 0.0, 1e-6);
  EXPECT_THROW(act::cross_entropy_rows(tape, logits, {0}), act::ShapeError);
  EXPECT_THROW(act::cross_entropy_rows(tape, logits, {0, 5}), act::ArgumentError);

  auto uniform = DTensor::filled({4, 8}, 0.7);
  EXPECT_NEAR(act::kl_to_uniform_loss(tape, uniform).item(), 0.0, 1e-9);
  EXPECT_NEAR(act::kl_to_uniform_metric(uniform), 0.0, 1e-12);

  auto peaked = DTensor::zeros({2, 8});
  peaked.v()[0] = 20.0;
  peaked.v()[8 + 3] = 20.0;
  const double logv = std::log(8.0);
  EXPECT_NEAR(act::kl_to_uniform_loss(tape, peaked).item(), logv, 1e-3);
  EXPECT_NEAR(act::kl_to_uniform_metric(peaked), logv, 1e-3);
  EXPECT_LE(act::kl_to_uniform_metric(peaked), logv);

  // KL loss gradient sanity via finite differences
  Rng rng(14);
  auto l = act_test::rand_tensor({3, 5}, rng, 1.2);
  auto res = act_test::grad_check_tape(
      [](DTape& t, const std::vector<DTensor>& ls) {
        return act::kl_to_uniform_loss(t, ls[0]);
      },
      {l});
  EXPECT_TRUE(res.ok) << res.detail;
}

TEST(Losses, LayerNormValuesRows) {
  Rng rng(15);
  auto x = act_test::rand_tensor({3, 9}, rng, 2.0, false);
  auto y = act::layer_norm_values(x);
  for (int64_t r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (int64_t j = 0; j < 9; ++j) mean += y.v()[static_cast<size_t>(r * 9 + j)];
    mean /= 9.0;
    for (int64_t j = 0; j < 9; ++j) {
      const double d = y.v()[static_cast<size_t>(r * 9 + j)] - mean;
      var += d * d;
    }
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(var / 9.0, 1.0, 1e-3);
  }
}
