#ifndef BIMAPPER_MODEL_HPP
#define BIMAPPER_MODEL_HPP

// Dual-stream BEV mapper.
//
//   GV stream: shared conv encoder per view -> per-view two-layer MLP that maps
//              the flattened pixel-frame features straight onto the ego
//              feature grid -> summed over views.
//   LV stream: ground-plane warp of each view -> small encoder-decoder on the
//              warped grid (camera-frame class logits + features) -> features
//              resampled into the ego grid through the extrinsics, averaged
//              where views overlap.
//   Fusion:    w_gv * f_gv + w_lv * f_lv -> conv decoder -> per-class sigmoid.
//
// Each stream also carries a 1x1 foreground head used for mutual learning.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bimapper/autodiff.hpp"
#include "bimapper/error.hpp"
#include "bimapper/grid.hpp"
#include "bimapper/ipm.hpp"
#include "bimapper/synthworld.hpp"

namespace bimapper {

struct ModelConfig {
	int views = 4;
	int image_width = 128;
	int image_height = 64;
	int grid_cols = 60;
	int grid_rows = 120;
	int ipm_cols = 20;
	int ipm_rows = 52;
	int enc1 = 8;
	int enc2 = 16;
	int enc3 = 16;
	int gv_hidden = 32;
	int feat_channels = 4;
	int lv1 = 8;
	int lv2 = 16;
	int dec_channels = 8;
	double fuse_gv = 1.0;
	double fuse_lv = 0.1;
	// The GV projection predicts a grid `gv_stride` times coarser than the
	// fusion grid, nearest-upsampled before fusion.
	int gv_stride = 4;
	// Initial bias of the per-class head, a log-odds prior for sparse classes.
	double head_bias_init = -3.0;

	static ModelConfig for_world(const WorldConfig& w) {
		ModelConfig m;
		m.views = w.rig.views;
		m.image_width = w.rig.image_width;
		m.image_height = w.rig.image_height;
		m.grid_cols = w.grid.cols();
		m.grid_rows = w.grid.rows();
		m.ipm_cols = w.ipm.out_width;
		m.ipm_rows = w.ipm.out_height;
		return m;
	}

	void validate() const {
		if (views < 1) throw InvalidArgument("model needs at least one view");
		if (image_width % 8 || image_height % 8) {
			throw InvalidArgument("image dimensions must be multiples of 8 for the encoder");
		}
		if (gv_stride < 1 || grid_cols % gv_stride || grid_rows % gv_stride) {
			throw InvalidArgument("gv_stride must divide the ego grid dimensions");
		}
		if (ipm_cols % 4 || ipm_rows % 4) {
			throw InvalidArgument("warp grid dimensions must be multiples of 4 for the segmentation net");
		}
	}

	// Architecture equality; fusion weights are a training choice.
	[[nodiscard]] bool same_architecture(const ModelConfig& o) const {
		return views == o.views && image_width == o.image_width && image_height == o.image_height &&
		       grid_cols == o.grid_cols && grid_rows == o.grid_rows && ipm_cols == o.ipm_cols &&
		       ipm_rows == o.ipm_rows && enc1 == o.enc1 && enc2 == o.enc2 && enc3 == o.enc3 &&
		       gv_hidden == o.gv_hidden && feat_channels == o.feat_channels && lv1 == o.lv1 &&
		       lv2 == o.lv2 && dec_channels == o.dec_channels && gv_stride == o.gv_stride;
	}
};

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
	j = {{"views", m.views},         {"image_width", m.image_width}, {"image_height", m.image_height},
	     {"grid_cols", m.grid_cols}, {"grid_rows", m.grid_rows},     {"ipm_cols", m.ipm_cols},
	     {"ipm_rows", m.ipm_rows},   {"enc1", m.enc1},               {"enc2", m.enc2},
	     {"enc3", m.enc3},           {"gv_hidden", m.gv_hidden},     {"feat_channels", m.feat_channels},
	     {"lv1", m.lv1},             {"lv2", m.lv2},                 {"dec_channels", m.dec_channels},
	     {"fuse_gv", m.fuse_gv},     {"fuse_lv", m.fuse_lv},         {"gv_stride", m.gv_stride},
	     {"head_bias_init", m.head_bias_init}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
	j.at("views").get_to(m.views);
	j.at("image_width").get_to(m.image_width);
	j.at("image_height").get_to(m.image_height);
	j.at("grid_cols").get_to(m.grid_cols);
	j.at("grid_rows").get_to(m.grid_rows);
	j.at("ipm_cols").get_to(m.ipm_cols);
	j.at("ipm_rows").get_to(m.ipm_rows);
	j.at("enc1").get_to(m.enc1);
	j.at("enc2").get_to(m.enc2);
	j.at("enc3").get_to(m.enc3);
	j.at("gv_hidden").get_to(m.gv_hidden);
	j.at("feat_channels").get_to(m.feat_channels);
	j.at("lv1").get_to(m.lv1);
	j.at("lv2").get_to(m.lv2);
	j.at("dec_channels").get_to(m.dec_channels);
	j.at("fuse_gv").get_to(m.fuse_gv);
	j.at("fuse_lv").get_to(m.fuse_lv);
	j.at("gv_stride").get_to(m.gv_stride);
	j.at("head_bias_init").get_to(m.head_bias_init);
}

// Which part of the network a parameter belongs to.
enum class Stream { GV, LV, Decoder };

inline const char* stream_name(Stream s) {
	switch (s) {
	case Stream::GV: return "gv";
	case Stream::LV: return "lv";
	case Stream::Decoder: return "decoder";
	}
	return "?";
}

template <class T>
struct NamedParameter {
	std::string name;
	Stream stream;
	ad::Tensor<T> tensor;
};

// One-hot [kCount,H,W] encoding; VOID cells are all-zero.
template <class T>
ad::Tensor<T> one_hot(const SemanticGrid& g) {
	const std::size_t hw = g.size();
	std::vector<T> v(classes::kCount * hw, T(0));
	for (std::size_t i = 0; i < hw; ++i) {
		const ClassId c = g.data[i];
		if (c < classes::kCount) v[c * hw + i] = T(1);
	}
	return ad::Tensor<T>::constant({static_cast<std::size_t>(classes::kCount),
	                                 static_cast<std::size_t>(g.height), static_cast<std::size_t>(g.width)},
	                                std::move(v));
}

// Precomputed resampling of the per-view warp-grid features into the ego
// feature grid: per view a gather table over [C, ipm_rows, ipm_cols], plus
// the reciprocal of the number of views covering each ego cell.
struct LvMergePlan {
	std::vector<std::shared_ptr<const std::vector<int>>> gather;
	std::vector<float> inv_count;  // per ego cell, 0 when uncovered
	std::vector<float> coverage;   // per ego cell, 1 when covered

	static LvMergePlan build(const std::vector<CameraView>& cams, const IpmSpec& ipm, const GridSpec& grid,
	                         int channels) {
		LvMergePlan plan;
		const GridLayout eg = GridLayout::from(grid);
		const GridLayout cg = GridLayout::from(ipm);
		const std::size_t cells = static_cast<std::size_t>(eg.cols) * eg.rows;
		const std::size_t src_cells = static_cast<std::size_t>(cg.cols) * cg.rows;
		std::vector<int> count(cells, 0);
		for (const auto& cam : cams) {
			auto table = std::make_shared<std::vector<int>>(cells * channels, -1);
			for (int r = 0; r < eg.rows; ++r) {
				for (int c = 0; c < eg.cols; ++c) {
					const auto [x, z] = eg.center(c, r);
					const CamPoint p = ego_to_cam({x, 0.0, z}, cam.extrinsics);
					if (!(p.z > 0.0)) continue;
					const auto src = world_to_cell(p.x, p.z, cg);
					if (!src) continue;
					const std::size_t dst = static_cast<std::size_t>(r) * eg.cols + c;
					const std::size_t s = static_cast<std::size_t>(src->row) * cg.cols + src->col;
					for (int ch = 0; ch < channels; ++ch) {
						(*table)[ch * cells + dst] = static_cast<int>(ch * src_cells + s);
					}
					++count[dst];
				}
			}
			plan.gather.push_back(std::move(table));
		}
		plan.inv_count.resize(cells);
		plan.coverage.resize(cells);
		for (std::size_t i = 0; i < cells; ++i) {
			plan.inv_count[i] = count[i] ? 1.0f / static_cast<float>(count[i]) : 0.0f;
			plan.coverage[i] = count[i] ? 1.0f : 0.0f;
		}
		return plan;
	}
};

// Model inputs for one frame, already one-hot encoded.
template <class T>
struct FrameInput {
	std::vector<ad::Tensor<T>> images;  // per view [K, H, W]
	std::vector<ad::Tensor<T>> warped;  // per view [K, ipm_rows, ipm_cols]
	std::shared_ptr<const LvMergePlan> plan;
};

template <class T>
FrameInput<T> prepare_input(const std::vector<SemanticGrid>& images, const std::vector<CameraView>& cams,
                            const IpmSpec& ipm, std::shared_ptr<const LvMergePlan> plan) {
	if (images.size() != cams.size()) {
		throw ViewCountMismatch(std::to_string(images.size()) + " images vs " + std::to_string(cams.size()) +
		                        " cameras");
	}
	FrameInput<T> in;
	for (std::size_t v = 0; v < images.size(); ++v) {
		in.images.push_back(one_hot<T>(images[v]));
		in.warped.push_back(one_hot<T>(ipm_warp(images[v], cams[v].intrinsics, ipm)));
	}
	in.plan = std::move(plan);
	return in;
}

template <class T>
struct StreamOutputs {
	ad::Tensor<T> f_gv;                            // [c, rows, cols]
	ad::Tensor<T> f_lv;                            // [c, rows, cols]
	std::vector<ad::Tensor<T>> per_view_lv_logits;  // [K, ipm_rows, ipm_cols]
	ad::Tensor<T> fg_gv;                            // [1, rows, cols]
	ad::Tensor<T> fg_lv;                            // [1, rows, cols]
	ad::Tensor<T> probs;                            // [kForeground, rows, cols]
};

template <class T = float>
class BiMapperModel {
public:
	BiMapperModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
		cfg_.validate();
		std::mt19937_64 rng(seed);
		const std::size_t K = classes::kCount;
		const auto sz = [](int v) { return static_cast<std::size_t>(v); };

		enc_ = {conv_param("gv.enc.conv1", Stream::GV, sz(cfg.enc1), K, 3, rng),
		        conv_param("gv.enc.conv2", Stream::GV, sz(cfg.enc2), sz(cfg.enc1), 3, rng),
		        conv_param("gv.enc.conv3", Stream::GV, sz(cfg.enc3), sz(cfg.enc2), 3, rng)};
		const std::size_t flat = sz(cfg.enc3) * sz(cfg.image_height / 8) * sz(cfg.image_width / 8);
		const std::size_t ego = sz(cfg.feat_channels) * sz(cfg.grid_rows / cfg.gv_stride) *
		                        sz(cfg.grid_cols / cfg.gv_stride);
		if (cfg.gv_stride > 1) {
			const std::size_t c = sz(cfg.feat_channels), rows = sz(cfg.grid_rows), cols = sz(cfg.grid_cols);
			const std::size_t s = sz(cfg.gv_stride), cr = rows / s, cc = cols / s;
			auto up = std::make_shared<std::vector<int>>(c * rows * cols);
			for (std::size_t ch = 0; ch < c; ++ch) {
				for (std::size_t r = 0; r < rows; ++r) {
					for (std::size_t k = 0; k < cols; ++k) {
						(*up)[(ch * rows + r) * cols + k] = static_cast<int>((ch * cr + r / s) * cc + k / s);
					}
				}
			}
			gv_upsample_ = std::move(up);
		}
		for (int v = 0; v < cfg.views; ++v) {
			const std::string p = "gv.mlp" + std::to_string(v);
			Mlp m;
			m.w1 = add_param(p + ".w1", Stream::GV, {flat, sz(cfg.gv_hidden)}, std::sqrt(6.0 / flat), rng);
			m.b1 = add_param(p + ".b1", Stream::GV, {1, sz(cfg.gv_hidden)}, 0.0, rng);
			m.w2 = add_param(p + ".w2", Stream::GV, {sz(cfg.gv_hidden), ego}, std::sqrt(3.0 / cfg.gv_hidden), rng);
			m.b2 = add_param(p + ".b2", Stream::GV, {1, ego}, 0.0, rng);
			mlps_.push_back(m);
		}

		lv_in_ = conv_param("lv.seg.in", Stream::LV, sz(cfg.lv1), K, 3, rng);
		lv_down1_ = conv_param("lv.seg.down1", Stream::LV, sz(cfg.lv2), sz(cfg.lv1), 3, rng);
		lv_down2_ = conv_param("lv.seg.down2", Stream::LV, sz(cfg.lv2), sz(cfg.lv2), 3, rng);
		lv_up2_ = upconv_param("lv.seg.up2", Stream::LV, sz(cfg.lv2), sz(cfg.lv2), rng);
		lv_up1_ = upconv_param("lv.seg.up1", Stream::LV, sz(cfg.lv2), sz(cfg.lv1), rng);
		lv_logits_ = conv_param("lv.seg.logits", Stream::LV, K, sz(cfg.lv1), 1, rng);
		lv_feat_ = conv_param("lv.seg.feat", Stream::LV, sz(cfg.feat_channels), sz(cfg.lv1), 1, rng);

		fg_gv_ = conv_param("gv.fg_head", Stream::GV, 1, sz(cfg.feat_channels), 1, rng);
		fg_lv_ = conv_param("lv.fg_head", Stream::LV, 1, sz(cfg.feat_channels), 1, rng);

		dec1_ = conv_param("decoder.conv1", Stream::Decoder, sz(cfg.dec_channels), sz(cfg.feat_channels), 3, rng);
		dec2_ = conv_param("decoder.conv2", Stream::Decoder, sz(cfg.dec_channels), sz(cfg.dec_channels), 3, rng);
		head_ = conv_param("decoder.head", Stream::Decoder, classes::kForeground, sz(cfg.dec_channels), 1, rng);
		for (auto& b : head_.b.data()) b = static_cast<T>(cfg.head_bias_init);
	}

	BiMapperModel(const BiMapperModel&) = delete;
	BiMapperModel& operator=(const BiMapperModel&) = delete;
	BiMapperModel(BiMapperModel&&) noexcept = default;
	BiMapperModel& operator=(BiMapperModel&&) noexcept = default;

	[[nodiscard]] const ModelConfig& config() const { return cfg_; }
	ModelConfig& config() { return cfg_; }
	[[nodiscard]] std::vector<NamedParameter<T>>& parameters() { return params_; }
	[[nodiscard]] const std::vector<NamedParameter<T>>& parameters() const { return params_; }

	void zero_grad() {
		for (auto& p : params_) p.tensor.zero_grad();
	}

	[[nodiscard]] ad::Shape feature_shape() const {
		return {static_cast<std::size_t>(cfg_.feat_channels), static_cast<std::size_t>(cfg_.grid_rows),
		        static_cast<std::size_t>(cfg_.grid_cols)};
	}

	// One view of the GV stream: encode, flatten, MLP, reshape to the ego grid.
	ad::Tensor<T> gv_view(std::size_t view, const ad::Tensor<T>& image) const {
		ad::Tensor<T> x = ad::relu(conv(enc_[0], image, 2));
		x = ad::relu(conv(enc_[1], x, 2));
		x = ad::relu(conv(enc_[2], x, 2));
		x = ad::reshape(x, {1, x.size()});
		const Mlp& m = mlps_.at(view);
		x = ad::relu(ad::add(ad::matmul(x, m.w1), m.b1));
		x = ad::add(ad::matmul(x, m.w2), m.b2);
		if (gv_upsample_) return ad::gather(x, gv_upsample_, feature_shape());
		return ad::reshape(x, feature_shape());
	}

	ad::Tensor<T> gv_forward(const std::vector<ad::Tensor<T>>& images) const {
		if (images.size() != mlps_.size()) {
			throw ShapeMismatch("gv_forward: " + std::to_string(images.size()) + " views for " +
			                    std::to_string(mlps_.size()) + " MLPs");
		}
		ad::Tensor<T> f = gv_view(0, images[0]);
		for (std::size_t v = 1; v < images.size(); ++v) f = ad::add(f, gv_view(v, images[v]));
		return f;
	}

	// Segmentation net on one warped view: returns (class logits, features),
	// both on the warp grid.
	std::pair<ad::Tensor<T>, ad::Tensor<T>> lv_view(const ad::Tensor<T>& warped) const {
		const ad::Tensor<T> e1 = ad::relu(conv(lv_in_, warped, 1));
		const ad::Tensor<T> e2 = ad::relu(conv(lv_down1_, e1, 2));
		const ad::Tensor<T> e3 = ad::relu(conv(lv_down2_, e2, 2));
		const ad::Tensor<T> d2 = ad::relu(ad::add(upconv(lv_up2_, e3), e2));
		const ad::Tensor<T> d1 = ad::relu(ad::add(upconv(lv_up1_, d2), e1));
		return {conv(lv_logits_, d1, 1), ad::relu(conv(lv_feat_, d1, 1))};
	}

	std::pair<ad::Tensor<T>, std::vector<ad::Tensor<T>>> lv_forward(const std::vector<ad::Tensor<T>>& warped,
	                                                                const LvMergePlan& plan) const {
		if (warped.size() != plan.gather.size()) {
			throw ShapeMismatch("lv_forward: " + std::to_string(warped.size()) + " views, plan for " +
			                    std::to_string(plan.gather.size()));
		}
		std::vector<ad::Tensor<T>> logits;
		ad::Tensor<T> acc;
		for (std::size_t v = 0; v < warped.size(); ++v) {
			auto [lg, feat] = lv_view(warped[v]);
			logits.push_back(lg);
			ad::Tensor<T> ego = ad::gather(feat, plan.gather[v], feature_shape());
			acc = acc.defined() ? ad::add(acc, ego) : ego;
		}
		const std::size_t cells = plan.inv_count.size();
		std::vector<T> w(acc.size());
		for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(plan.inv_count[i % cells]);
		return {ad::mul(acc, ad::Tensor<T>::constant(feature_shape(), std::move(w))), std::move(logits)};
	}

	static ad::Tensor<T> fuse(const ad::Tensor<T>& f_gv, const ad::Tensor<T>& f_lv, double w_gv, double w_lv) {
		if (f_gv.shape() != f_lv.shape()) {
			throw ShapeMismatch("fuse: " + ad::to_string(f_gv.shape()) + " vs " + ad::to_string(f_lv.shape()));
		}
		return ad::add(ad::scale(f_gv, static_cast<T>(w_gv)), ad::scale(f_lv, static_cast<T>(w_lv)));
	}

	// Per-class foreground probabilities [kForeground, rows, cols].
	ad::Tensor<T> decode(const ad::Tensor<T>& fused) const {
		if (fused.shape() != feature_shape()) {
			throw ShapeMismatch("decode: " + ad::to_string(fused.shape()) + " vs " +
			                    ad::to_string(feature_shape()));
		}
		ad::Tensor<T> x = ad::relu(conv(dec1_, fused, 1));
		x = ad::relu(conv(dec2_, x, 1));
		return ad::sigmoid(conv(head_, x, 1));
	}

	ad::Tensor<T> foreground_head(const ad::Tensor<T>& features, Stream stream) const {
		const Conv& h = stream == Stream::GV ? fg_gv_ : fg_lv_;
		return ad::sigmoid(conv(h, features, 1));
	}

	StreamOutputs<T> forward(const FrameInput<T>& in) const {
		StreamOutputs<T> out;
		out.f_gv = gv_forward(in.images);
		auto [f_lv, logits] = lv_forward(in.warped, *in.plan);
		out.f_lv = std::move(f_lv);
		out.per_view_lv_logits = std::move(logits);
		out.fg_gv = foreground_head(out.f_gv, Stream::GV);
		out.fg_lv = foreground_head(out.f_lv, Stream::LV);
		out.probs = decode(fuse(out.f_gv, out.f_lv, cfg_.fuse_gv, cfg_.fuse_lv));
		return out;
	}

	NamedParameter<T>* find(const std::string& name) {
		for (auto& p : params_) {
			if (p.name == name) return &p;
		}
		return nullptr;
	}

private:
	struct Conv {
		ad::Tensor<T> w;
		ad::Tensor<T> b;
	};
	struct Mlp {
		ad::Tensor<T> w1, b1, w2, b2;
	};

	static ad::Tensor<T> conv(const Conv& c, const ad::Tensor<T>& x, std::size_t stride) {
		return ad::conv2d(x, c.w, c.b, stride);
	}
	static ad::Tensor<T> upconv(const Conv& c, const ad::Tensor<T>& x) {
		return ad::conv_transpose2d(x, c.w, c.b);
	}

	ad::Tensor<T> add_param(const std::string& name, Stream stream, ad::Shape shape, double bound,
	                        std::mt19937_64& rng) {
		std::vector<T> v(ad::numel(shape), T(0));
		if (bound > 0.0) {
			std::uniform_real_distribution<double> dist(-bound, bound);
			for (auto& x : v) x = static_cast<T>(dist(rng));
		}
		auto t = ad::Tensor<T>::parameter(std::move(shape), std::move(v));
		params_.push_back({name, stream, t});
		return t;
	}

	Conv conv_param(const std::string& name, Stream stream, std::size_t co, std::size_t ci, std::size_t k,
	                std::mt19937_64& rng) {
		const double fan_in = static_cast<double>(ci * k * k);
		Conv c;
		c.w = add_param(name + ".w", stream, {co, ci, k, k}, std::sqrt(6.0 / fan_in), rng);
		c.b = add_param(name + ".b", stream, {co}, 0.0, rng);
		return c;
	}

	Conv upconv_param(const std::string& name, Stream stream, std::size_t ci, std::size_t co,
	                  std::mt19937_64& rng) {
		Conv c;
		c.w = add_param(name + ".w", stream, {ci, co, 2, 2}, std::sqrt(6.0 / static_cast<double>(ci)), rng);
		c.b = add_param(name + ".b", stream, {co}, 0.0, rng);
		return c;
	}

	ModelConfig cfg_;
	std::vector<NamedParameter<T>> params_;
	std::vector<Conv> enc_;
	std::vector<Mlp> mlps_;
	Conv lv_in_, lv_down1_, lv_down2_, lv_up2_, lv_up1_, lv_logits_, lv_feat_;
	Conv fg_gv_, fg_lv_;
	Conv dec1_, dec2_, head_;
	std::shared_ptr<const std::vector<int>> gv_upsample_;
};

// Hard labels from per-class probabilities: the most probable foreground class
// when it clears `threshold`, otherwise background.
template <class T>
SemanticGrid to_semantic_grid(const ad::Tensor<T>& probs, const GridLayout& layout, double threshold = 0.5) {
	const std::size_t nc = probs.dim(0);
	const std::size_t hw = probs.dim(1) * probs.dim(2);
	SemanticGrid g(layout, classes::kBackground);
	for (std::size_t i = 0; i < hw; ++i) {
		std::size_t best = 0;
		for (std::size_t c = 1; c < nc; ++c) {
			if (probs[c * hw + i] > probs[best * hw + i]) best = c;
		}
		if (probs[best * hw + i] >= static_cast<T>(threshold)) {
			g.data[i] = static_cast<ClassId>(best + 1);
		}
	}
	return g;
}

} // namespace bimapper

#endif
