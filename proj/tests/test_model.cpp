#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "bimapper/model.hpp"
#include "bimapper/synthworld.hpp"
#include "bimapper/trainer.hpp"

using namespace bimapper;
using Model = BiMapperModel<double>;
using DTensor = ad::Tensor<double>;

namespace {

ModelConfig tiny(int views) {
	ModelConfig m;
	m.views = views;
	m.image_width = 16;
	m.image_height = 8;
	m.grid_cols = 6;
	m.grid_rows = 8;
	m.ipm_cols = 8;
	m.ipm_rows = 8;
	m.gv_hidden = 5;
	m.gv_stride = 1;
	m.head_bias_init = 0.0;
	return m;
}

DTensor random_image(std::mt19937_64& rng, const ModelConfig& m) {
	SemanticGrid g(m.image_width, m.image_height);
	std::uniform_int_distribution<int> c(0, classes::kCount - 1);
	for (auto& x : g.data) x = static_cast<ClassId>(c(rng));
	return one_hot<double>(g);
}

DTensor filled(const ad::Shape& s, double v) { return DTensor::constant(s, std::vector<double>(ad::numel(s), v)); }

double max_abs_diff(const DTensor& a, const DTensor& b) {
	double m = 0;
	for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
	return m;
}

void copy_param(Model& dst, const std::string& to, Model& src, const std::string& from) {
	auto d = dst.find(to)->tensor.data();
	const auto s = src.find(from)->tensor.values();
	std::copy(s.begin(), s.end(), d.begin());
}

} // namespace

TEST(GvForward, ZeroImagesGiveZeroFeatures) {
	const auto cfg = tiny(3);
	const Model m(cfg, 1);
	const std::vector<DTensor> imgs(3, filled({classes::kCount, 8, 16}, 0.0));
	const DTensor f = m.gv_forward(imgs);
	EXPECT_EQ(f.shape(), m.feature_shape());
	for (double x : f.values()) EXPECT_EQ(x, 0.0);
}

TEST(GvForward, SumOfViews) {
	std::mt19937_64 rng(2);
	const auto cfg = tiny(2);
	Model m(cfg, 3);
	const DTensor img = random_image(rng, cfg);
	// view 1 gets view 0's weights: two identical views double the output
	for (const char* p : {"w1", "b1", "w2", "b2"}) {
		copy_param(m, std::string("gv.mlp1.") + p, m, std::string("gv.mlp0.") + p);
	}
	const DTensor single = m.gv_view(0, img);
	const DTensor both = m.gv_forward({img, img});
	for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(both[i], 2 * single[i], 1e-12);
	// zeroing the second view's projection leaves the first view alone
	for (auto& x : m.find("gv.mlp1.w2")->tensor.data()) x = 0;
	const DTensor other = random_image(rng, cfg);
	EXPECT_LT(max_abs_diff(m.gv_forward({img, other}), single), 1e-12);
	EXPECT_THROW((void)m.gv_forward({img}), ShapeMismatch);
}

TEST(GvForward, ViewPermutationWithMatchedWeights) {
	std::mt19937_64 rng(4);
	const auto cfg = tiny(3);
	Model a(cfg, 5);
	Model b(cfg, 6);
	const std::vector<int> perm{2, 0, 1};
	for (const auto& p : a.parameters()) {
		if (p.name.rfind("gv.mlp", 0) == 0) continue;
		copy_param(b, p.name, a, p.name);
	}
	for (int v = 0; v < 3; ++v) {
		for (const char* p : {"w1", "b1", "w2", "b2"}) {
			copy_param(b, "gv.mlp" + std::to_string(v) + "." + p, a, "gv.mlp" + std::to_string(perm[v]) + "." + p);
		}
	}
	std::vector<DTensor> imgs;
	for (int v = 0; v < 3; ++v) imgs.push_back(random_image(rng, cfg));
	const std::vector<DTensor> permuted{imgs[2], imgs[0], imgs[1]};
	EXPECT_LT(max_abs_diff(a.gv_forward(imgs), b.gv_forward(permuted)), 1e-12);
}

TEST(GvForward, StrideUpsamplesNearest) {
	std::mt19937_64 rng(7);
	auto cfg = tiny(1);
	cfg.gv_stride = 2;
	const Model m(cfg, 8);
	const DTensor f = m.gv_view(0, random_image(rng, cfg));
	ASSERT_EQ(f.shape(), m.feature_shape());
	for (std::size_t c = 0; c < 4; ++c) {
		for (std::size_t r = 0; r < 8; ++r) {
			for (std::size_t k = 0; k < 6; ++k) {
				EXPECT_EQ(f[(c * 8 + r) * 6 + k], f[(c * 8 + r / 2 * 2) * 6 + k / 2 * 2]);
			}
		}
	}
	cfg.gv_stride = 4;  // does not divide 6 columns
	EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(Fuse, WeightedAddition) {
	const ad::Shape s{4, 3, 2};
	const DTensor one = filled(s, 1.0);
	const DTensor f = Model::fuse(one, one, 1.0, 0.1);
	for (double x : f.values()) EXPECT_NEAR(x, 1.1, 1e-15);
	const DTensor zero = filled(s, 0.0);
	EXPECT_EQ(max_abs_diff(Model::fuse(one, zero, 1.0, 0.1), one), 0.0);
	std::mt19937_64 rng(9);
	std::uniform_real_distribution<double> u(-1, 1);
	std::vector<double> v(24), w(24), z(24);
	for (std::size_t i = 0; i < 24; ++i) {
		v[i] = u(rng);
		w[i] = u(rng);
		z[i] = u(rng);
	}
	const DTensor a = DTensor::constant(s, v), b = DTensor::constant(s, w), c = DTensor::constant(s, z);
	const DTensor cancel = Model::fuse(a, ad::scale(a, -1.0), 1.0, 1.0);
	for (double x : cancel.values()) EXPECT_EQ(x, 0.0);
	// linear in the GV argument
	const DTensor lhs = Model::fuse(ad::add(a, b), c, 1.0, 0.1);
	const DTensor rhs = ad::add(Model::fuse(a, c, 1.0, 0.1), b);
	EXPECT_LT(max_abs_diff(lhs, rhs), 1e-15);
	EXPECT_THROW((void)Model::fuse(one, filled({4, 3, 3}, 0.0), 1, 1), ShapeMismatch);
}

TEST(Heads, ForegroundAndDecoderRanges) {
	std::mt19937_64 rng(10);
	const auto cfg = tiny(1);
	Model m(cfg, 11);
	for (auto& p : m.parameters()) {
		if (p.name.rfind("gv.fg_head", 0) == 0) std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
	}
	const DTensor zero = filled(m.feature_shape(), 0.0);
	const DTensor fg = m.foreground_head(zero, Stream::GV);
	EXPECT_EQ(fg.shape(), (ad::Shape{1, 8, 6}));
	for (double x : fg.values()) EXPECT_EQ(x, 0.5);
	// raising the bias raises the probability
	m.find("gv.fg_head.b")->tensor.data()[0] = 0.3;
	const DTensor raised = m.foreground_head(zero, Stream::GV);
	for (double x : raised.values()) EXPECT_GT(x, 0.5);

	std::uniform_real_distribution<double> u(-20, 20);
	std::vector<double> v(ad::numel(m.feature_shape()));
	for (auto& x : v) x = u(rng);
	const DTensor probs = m.decode(DTensor::constant(m.feature_shape(), v));
	EXPECT_EQ(probs.shape(), (ad::Shape{3, 8, 6}));
	for (double x : probs.values()) {
		EXPECT_GE(x, 0.0);
		EXPECT_LE(x, 1.0);
	}
	const SemanticGrid g = to_semantic_grid(probs, GridLayout{-1.5, -2, 0.5, 0.5, 6, 8}, 0.5);
	EXPECT_EQ(g.width, 6);
	for (ClassId c : g.data) EXPECT_LT(c, classes::kCount);
}

TEST(Decode, HeadBiasInitialisesPrior) {
	auto cfg = tiny(1);
	cfg.head_bias_init = -3.0;
	Model m(cfg, 12);
	for (double b : m.find("decoder.head.b")->tensor.values()) EXPECT_EQ(b, -3.0);
}

TEST(ToSemanticGrid, ThresholdAndArgmax) {
	// cell 0: divider wins; cell 1: nothing clears 0.5; cell 2: boundary wins
	const DTensor p = DTensor::constant({3, 1, 3}, {0.9, 0.2, 0.6, 0.8, 0.4, 0.1, 0.1, 0.3, 0.7});
	const SemanticGrid g = to_semantic_grid(p, GridLayout{0, 0, 1, 1, 3, 1}, 0.5);
	EXPECT_EQ(g.at(0, 0), classes::kDivider);
	EXPECT_EQ(g.at(1, 0), classes::kBackground);
	EXPECT_EQ(g.at(2, 0), classes::kBoundary);
}

namespace {

struct DeskFixture {
	WorldConfig world = WorldConfig::desk();
	SceneSpec scene = generate_scene(scene_seed(3, 0), world);
	Frame frame = render_frame(scene);
	ModelConfig cfg = ModelConfig::for_world(world);
};

// Independent oracle for the LV ego merge: for each ego cell, average the
// per-view features at the warp-grid cell containing its ground point.
std::vector<double> merge_oracle(const DeskFixture& d, const std::vector<DTensor>& feats) {
	const GridLayout eg = GridLayout::from(d.world.grid);
	const IpmSpec& ipm = d.world.ipm;
	const int cc = ipm.out_width, cr = ipm.out_height;
	const double rx = (ipm.x_range.second - ipm.x_range.first) / cc;
	const double rz = (ipm.z_range.second - ipm.z_range.first) / cr;
	const std::size_t ch = static_cast<std::size_t>(d.cfg.feat_channels);
	const std::size_t cells = static_cast<std::size_t>(eg.cols) * eg.rows;
	std::vector<double> out(ch * cells, 0.0);
	for (int r = 0; r < eg.rows; ++r) {
		for (int c = 0; c < eg.cols; ++c) {
			const double x = eg.x_min + (c + 0.5) * eg.dx, z = eg.z_min + (r + 0.5) * eg.dz;
			std::vector<std::size_t> hits;
			std::vector<std::size_t> views;
			for (std::size_t v = 0; v < d.frame.cams.size(); ++v) {
				const auto& e = d.frame.cams[v].extrinsics;
				const Eigen::Vector3d p = e.rotation * Eigen::Vector3d(x, 0, z) + e.translation;
				if (p.z() <= 0) continue;
				const int sc = static_cast<int>(std::floor((p.x() - ipm.x_range.first) / rx + 1e-9));
				const int sr = static_cast<int>(std::floor((p.z() - ipm.z_range.first) / rz + 1e-9));
				if (sc < 0 || sr < 0 || sc >= cc || sr >= cr) continue;
				hits.push_back(static_cast<std::size_t>(sr) * cc + sc);
				views.push_back(v);
			}
			const std::size_t dst = static_cast<std::size_t>(r) * eg.cols + c;
			for (std::size_t k = 0; k < ch; ++k) {
				double acc = 0;
				for (std::size_t h = 0; h < hits.size(); ++h) {
					acc += feats[views[h]][k * static_cast<std::size_t>(cc * cr) + hits[h]];
				}
				out[k * cells + dst] = hits.empty() ? 0.0 : acc / static_cast<double>(hits.size());
			}
		}
	}
	return out;
}

} // namespace

TEST(LvForward, OverlapAveragesViews) {
	DeskFixture d;
	const Model m(d.cfg, 13);
	auto plan = std::make_shared<const LvMergePlan>(
	    LvMergePlan::build(d.frame.cams, d.world.ipm, d.world.grid, d.cfg.feat_channels));
	const FrameInput<double> in = prepare_input<double>(d.frame.images, d.frame.cams, d.world.ipm, plan);
	std::vector<DTensor> feats;
	for (const auto& w : in.warped) feats.push_back(m.lv_view(w).second);
	const auto [f_lv, logits] = m.lv_forward(in.warped, *plan);
	ASSERT_EQ(logits.size(), 4u);
	EXPECT_EQ(logits[0].shape(), (ad::Shape{classes::kCount, 52, 20}));
	const std::vector<double> oracle = merge_oracle(d, feats);
	double worst = 0;
	for (std::size_t i = 0; i < oracle.size(); ++i) worst = std::max(worst, std::abs(f_lv[i] - oracle[i]));
	EXPECT_LT(worst, 1e-12);
	// some ego cells are seen by two views, and the coverage mask agrees with the plan
	int overlap = 0;
	for (float ic : plan->inv_count) overlap += ic > 0 && ic < 1;
	EXPECT_GT(overlap, 0);
	EXPECT_THROW((void)m.lv_forward({in.warped[0]}, *plan), ShapeMismatch);
}

TEST(LvForward, PermutingViewsAndCalibrationsKeepsFeatures) {
	DeskFixture d;
	const Model m(d.cfg, 14);
	const std::vector<int> perm{3, 1, 0, 2};
	std::vector<SemanticGrid> imgs;
	std::vector<CameraView> cams;
	for (int v : perm) {
		imgs.push_back(d.frame.images[static_cast<std::size_t>(v)]);
		cams.push_back(d.frame.cams[static_cast<std::size_t>(v)]);
	}
	auto run = [&](const std::vector<SemanticGrid>& im, const std::vector<CameraView>& cs) {
		auto plan = std::make_shared<const LvMergePlan>(
		    LvMergePlan::build(cs, d.world.ipm, d.world.grid, d.cfg.feat_channels));
		const auto in = prepare_input<double>(im, cs, d.world.ipm, plan);
		return m.lv_forward(in.warped, *plan).first;
	};
	EXPECT_LT(max_abs_diff(run(d.frame.images, d.frame.cams), run(imgs, cams)), 1e-12);
}

TEST(Forward, EveryParameterReceivesGradient) {
	DeskFixture d;
	const Dataset data = make_dataset(d.world, 1, 21, 1);
	const auto cfg = d.cfg;
	Model m(cfg, 15);
	const auto samples = prepare_samples<double>(data, cfg);
	LossConfig lc;
	const auto fl = frame_loss(m, samples[0], lc.aml_start_epoch, lc);
	EXPECT_TRUE(fl.report.active_teachers.lv && fl.report.active_teachers.gv);
	ad::backward(fl.total);
	for (const auto& p : m.parameters()) {
		double g = 0;
		for (double x : p.tensor.grad()) g = std::max(g, std::abs(x));
		EXPECT_GT(g, 0.0) << p.name;
	}
	EXPECT_EQ(fl.out.f_gv.shape(), fl.out.f_lv.shape());
	EXPECT_EQ(fl.out.per_view_lv_logits.size(), 4u);
}

TEST(Forward, AslReachesLvButNotGv) {
	DeskFixture d;
	Model m(d.cfg, 16);
	auto plan = std::make_shared<const LvMergePlan>(
	    LvMergePlan::build(d.frame.cams, d.world.ipm, d.world.grid, d.cfg.feat_channels));
	const auto in = prepare_input<double>(d.frame.images, d.frame.cams, d.world.ipm, plan);
	const auto out = m.forward(in);
	ad::backward(across_space_loss<double>(out.per_view_lv_logits, d.frame.camera_gt));
	double lv = 0, gv = 0;
	for (const auto& p : m.parameters()) {
		for (double x : p.tensor.grad()) (p.stream == Stream::LV ? lv : gv) = std::max(p.stream == Stream::LV ? lv : gv, std::abs(x));
	}
	EXPECT_GT(lv, 0.0);
	EXPECT_EQ(gv, 0.0);
}

TEST(ModelConfig, JsonRoundTripAndArchitecture) {
	auto cfg = tiny(2);
	cfg.gv_stride = 2;
	cfg.head_bias_init = -2;
	const nlohmann::json j = cfg;
	const ModelConfig back = j.get<ModelConfig>();
	EXPECT_TRUE(back.same_architecture(cfg));
	EXPECT_EQ(back.head_bias_init, -2);
	auto other = cfg;
	other.fuse_lv = 1.0;
	EXPECT_TRUE(other.same_architecture(cfg));
	other.feat_channels = 8;
	EXPECT_FALSE(other.same_architecture(cfg));
	auto bad = cfg;
	bad.image_width = 20;
	EXPECT_THROW(bad.validate(), InvalidArgument);
}
