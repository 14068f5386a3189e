#ifndef BIMAPPER_TRAINER_HPP
#define BIMAPPER_TRAINER_HPP

// Adam, the step-decay learning-rate schedule, the epoch loop and checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <memory>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bimapper/dataset.hpp"
#include "bimapper/error.hpp"
#include "bimapper/io.hpp"
#include "bimapper/losses.hpp"
#include "bimapper/metrics.hpp"
#include "bimapper/model.hpp"

namespace bimapper {

struct AdamConfig {
	double beta1 = 0.9;
	double beta2 = 0.999;
	double eps = 1e-8;
};

struct TrainConfig {
	int epochs = 30;
	double lr = 1e-3;
	double lr_decay_factor = 0.1;
	int lr_decay_epoch = 10;
	int batch_size = 1;
	std::uint64_t seed = 0;
	LossConfig loss;
	AdamConfig adam;
	// Checks at every step that no teacher receives gradient from its own
	// mutual term. Costs one extra backward pass per active term.
	bool detach_probe = false;
	// Run the validation evaluation after every epoch.
	bool eval_each_epoch = true;

	void validate() const {
		if (!(lr > 0.0)) throw InvalidArgument("lr must be positive");
		if (epochs < 1) throw InvalidArgument("epochs must be at least 1");
		if (lr_decay_epoch > epochs) throw InvalidArgument("lr decay epoch beyond the last epoch");
		if (batch_size < 1) throw InvalidArgument("batch size must be at least 1");
		if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
			throw InvalidArgument("adam betas must be in [0,1)");
		}
		if (!(adam.eps > 0.0)) throw InvalidArgument("adam eps must be positive");
		loss.validate();
	}

	// Learning rate used throughout `epoch` (0-based).
	[[nodiscard]] double lr_at(int epoch) const { return epoch < lr_decay_epoch ? lr : lr * lr_decay_factor; }
};

inline nlohmann::json to_json_value(const TrainConfig& c) {
	return {{"epochs", c.epochs},
	        {"lr", c.lr},
	        {"lr_decay_factor", c.lr_decay_factor},
	        {"lr_decay_epoch", c.lr_decay_epoch},
	        {"batch_size", c.batch_size},
	        {"seed", c.seed},
	        {"alpha", c.loss.alpha},
	        {"aml_start_epoch", c.loss.aml_start_epoch},
	        {"mutual_form", to_string(c.loss.mutual_form)},
	        {"fg_threshold", c.loss.fg_threshold},
	        {"asl", !c.loss.ablate_asl},
	        {"aml", !c.loss.ablate_aml},
	        {"teacher_mode", to_string(c.loss.teacher_mode)},
	        {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}}};
}

// Moments of one parameter tensor.
template <class T>
struct AdamMoments {
	std::vector<T> m;
	std::vector<T> v;
};

// One bias-corrected Adam update of `w` at step `t` (1-based):
// w -= lr * m_hat / (sqrt(v_hat) + eps).
template <class T>
void adam_step(std::span<T> w, std::span<const T> g, AdamMoments<T>& st, double lr, long t,
               const AdamConfig& cfg = {}) {
	if (g.size() != w.size()) {
		throw ShapeMismatch("adam: " + std::to_string(w.size()) + " parameters, " + std::to_string(g.size()) +
		                    " gradients");
	}
	if (t < 1) throw InvalidArgument("adam step index starts at 1");
	if (st.m.empty() && st.v.empty()) {
		st.m.assign(w.size(), T(0));
		st.v.assign(w.size(), T(0));
	}
	if (st.m.size() != w.size() || st.v.size() != w.size()) {
		throw ShapeMismatch("adam: moment size does not match parameter size");
	}
	const double b1 = cfg.beta1, b2 = cfg.beta2;
	const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
	const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
	for (std::size_t i = 0; i < w.size(); ++i) {
		const double gi = static_cast<double>(g[i]);
		const double m = b1 * static_cast<double>(st.m[i]) + (1.0 - b1) * gi;
		const double v = b2 * static_cast<double>(st.v[i]) + (1.0 - b2) * gi * gi;
		st.m[i] = static_cast<T>(m);
		st.v[i] = static_cast<T>(v);
		const double mh = m / c1;
		const double vh = v / c2;
		w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mh / (std::sqrt(vh) + cfg.eps));
	}
}

template <class T>
class Adam {
public:
	explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

	void step(std::vector<NamedParameter<T>>& params, double lr) {
		if (moments_.empty()) moments_.resize(params.size());
		if (moments_.size() != params.size()) throw ShapeMismatch("adam: parameter list changed");
		++t_;
		for (std::size_t i = 0; i < params.size(); ++i) {
			auto& p = params[i].tensor;
			adam_step<T>(p.data(), p.grad(), moments_[i], lr, t_, cfg_);
		}
	}

	[[nodiscard]] long steps() const { return t_; }

private:
	AdamConfig cfg_;
	std::vector<AdamMoments<T>> moments_;
	long t_ = 0;
};

// ------------------------------------------------------------ prepared data

template <class T>
struct Sample {
	FrameInput<T> input;
	SemanticGrid ego_gt;
	std::vector<SemanticGrid> camera_gt;
	std::shared_ptr<const std::vector<T>> mutual_mask;  // LV-covered ego cells
};

// One-hot inputs, warps and merge plans for every frame; frames sharing a rig
// share one plan.
template <class T>
std::vector<Sample<T>> prepare_samples(const Dataset& d, const ModelConfig& mc) {
	std::vector<Sample<T>> out;
	std::vector<std::vector<CameraView>> rigs;
	std::vector<std::shared_ptr<const LvMergePlan>> plans;
	std::vector<std::shared_ptr<const std::vector<T>>> masks;
	auto same_rig = [](const std::vector<CameraView>& a, const std::vector<CameraView>& b) {
		if (a.size() != b.size()) return false;
		for (std::size_t i = 0; i < a.size(); ++i) {
			const auto& x = a[i];
			const auto& y = b[i];
			if (x.extrinsics.rotation != y.extrinsics.rotation || x.extrinsics.translation != y.extrinsics.translation ||
			    x.intrinsics.fx != y.intrinsics.fx || x.intrinsics.fy != y.intrinsics.fy ||
			    x.intrinsics.cx != y.intrinsics.cx || x.intrinsics.cy != y.intrinsics.cy ||
			    x.intrinsics.width != y.intrinsics.width || x.intrinsics.height != y.intrinsics.height) {
				return false;
			}
		}
		return true;
	};
	for (const Frame& f : d.frames) {
		if (static_cast<int>(f.cams.size()) != mc.views) {
			throw ViewCountMismatch("frame has " + std::to_string(f.cams.size()) + " views, model expects " +
			                        std::to_string(mc.views));
		}
		std::size_t k = 0;
		while (k < rigs.size() && !same_rig(rigs[k], f.cams)) ++k;
		if (k == rigs.size()) {
			rigs.push_back(f.cams);
			auto plan = std::make_shared<const LvMergePlan>(
			    LvMergePlan::build(f.cams, d.world.ipm, d.world.grid, mc.feat_channels));
			std::vector<T> mask(plan->coverage.begin(), plan->coverage.end());
			masks.push_back(std::make_shared<const std::vector<T>>(std::move(mask)));
			plans.push_back(std::move(plan));
		}
		Sample<T> s;
		s.input = prepare_input<T>(f.images, f.cams, d.world.ipm, plans[k]);
		s.ego_gt = f.ego_gt;
		s.camera_gt = f.camera_gt;
		s.mutual_mask = masks[k];
		out.push_back(std::move(s));
	}
	return out;
}

// ------------------------------------------------------------------- losses

template <class T>
struct FrameLoss {
	ad::Tensor<T> total;
	LossReport report;
	MutualTerms<T> mutual;
	StreamOutputs<T> out;
};

template <class T>
FrameLoss<T> frame_loss(const BiMapperModel<T>& model, const Sample<T>& s, int epoch, const LossConfig& cfg) {
	FrameLoss<T> fl;
	fl.out = model.forward(s.input);
	LossParts<T> parts;
	parts.bce = bce_loss(fl.out.probs, s.ego_gt);
	parts.asl = across_space_loss<T>(fl.out.per_view_lv_logits, s.camera_gt);
	fl.mutual = mutual_loss(fl.out.fg_gv, fl.out.fg_lv, epoch, cfg, s.mutual_mask.get());
	parts.mutual = fl.mutual.total;
	parts.teachers = fl.mutual.teachers;
	auto [total, report] = total_loss(parts, cfg);
	fl.total = total;
	fl.report = report;
	return fl;
}

template <class T>
EvalReport evaluate(const BiMapperModel<T>& model, const std::vector<Sample<T>>& samples,
                    const std::vector<std::size_t>& indices, double resolution) {
	Evaluator ev(resolution);
	for (auto i : indices) {
		const Sample<T>& s = samples.at(i);
		const StreamOutputs<T> out = model.forward(s.input);
		ev.add(to_semantic_grid(out.probs, s.ego_gt.metric()), s.ego_gt);
	}
	return ev.report();
}

// ---------------------------------------------------------------------- log

struct StepRecord {
	int epoch = 0;
	long step = 0;
	double lr = 0.0;
	LossReport loss;
	// Detachment probe: largest |grad| a mutual term sends into its teacher's
	// stream (must be exactly 0) and into its student's stream.
	bool probed = false;
	double teacher_grad_max = 0.0;
	double student_grad_max = 0.0;
};

struct EpochRecord {
	int epoch = 0;
	EvalReport eval;
};

inline nlohmann::json teachers_json(const Teachers& t) {
	nlohmann::json a = nlohmann::json::array();
	if (t.lv) a.push_back("lv");
	if (t.gv) a.push_back("gv");
	return a;
}

inline nlohmann::json to_json_value(const StepRecord& r) {
	nlohmann::json j = {{"epoch", r.epoch},
	                    {"step", r.step},
	                    {"lr", r.lr},
	                    {"bce", r.loss.bce},
	                    {"asl", r.loss.asl},
	                    {"mutual", r.loss.mutual},
	                    {"total", r.loss.total},
	                    {"active_teachers", teachers_json(r.loss.active_teachers)}};
	if (r.probed) {
		j["teacher_grad_max"] = r.teacher_grad_max;
		j["student_grad_max"] = r.student_grad_max;
	}
	return j;
}

inline nlohmann::json to_json_value(const EpochRecord& r) {
	nlohmann::json j = to_json(r.eval);
	j["epoch"] = r.epoch;
	return j;
}

struct TrainResult {
	std::vector<StepRecord> steps;
	std::vector<EpochRecord> epochs;
	EvalReport final_eval;
};

// ----------------------------------------------------------------- training

namespace detail {

inline bool in_stream(Stream s, bool lv) { return lv ? s == Stream::LV : s == Stream::GV; }

// Backpropagates one mutual term alone and returns the largest gradient
// magnitude in the teacher's and the student's stream. Leaves all gradients
// cleared.
template <class T>
std::pair<double, double> probe_term(BiMapperModel<T>& model, const ad::Tensor<T>& term, bool teacher_is_lv) {
	model.zero_grad();
	ad::Tape<T> tape(term);
	tape.backward();
	double teacher = 0.0, student = 0.0;
	for (const auto& p : model.parameters()) {
		double mx = 0.0;
		for (T g : p.tensor.grad()) mx = std::max(mx, std::abs(static_cast<double>(g)));
		if (in_stream(p.stream, teacher_is_lv)) teacher = std::max(teacher, mx);
		if (in_stream(p.stream, !teacher_is_lv)) student = std::max(student, mx);
	}
	for (ad::Node<T>* n : tape.nodes()) {
		if (n->backward) std::fill(n->grad.begin(), n->grad.end(), T(0));
	}
	model.zero_grad();
	return {teacher, student};
}

} // namespace detail

using StepCallback = std::function<void(const StepRecord&)>;
using EpochCallback = std::function<void(const EpochRecord&)>;

template <class T>
TrainResult train(BiMapperModel<T>& model, const Dataset& data, const std::vector<Sample<T>>& samples,
                  const TrainConfig& cfg, const StepCallback& on_step = {}, const EpochCallback& on_epoch = {}) {
	cfg.validate();
	if (data.train.empty()) throw DatasetEmpty("training split is empty");
	if (samples.size() != data.frames.size()) throw ShapeMismatch("prepared samples do not match the dataset");

	TrainResult result;
	Adam<T> opt(cfg.adam);
	std::mt19937_64 rng(scene_seed(cfg.seed, 0x5eed));
	std::vector<std::size_t> order = data.train;
	long step = 0;
	const double resolution = data.world.grid.resolution;

	for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
		std::shuffle(order.begin(), order.end(), rng);
		const double lr = cfg.lr_at(epoch);
		for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
			const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
			const T inv = static_cast<T>(1.0 / static_cast<double>(e - b));
			StepRecord rec;
			rec.epoch = epoch;
			rec.step = step;
			rec.lr = lr;
			model.zero_grad();
			for (std::size_t i = b; i < e; ++i) {
				FrameLoss<T> fl = frame_loss(model, samples[order[i]], epoch, cfg.loss);
				if (!std::isfinite(fl.report.total)) {
					throw NonFiniteLoss("non-finite loss at step " + std::to_string(step) + " (epoch " +
					                    std::to_string(epoch) + ")");
				}
				if (cfg.detach_probe && i == b && !cfg.loss.ablate_aml) {
					rec.probed = true;
					for (auto [term, lv_teaches] : {std::pair{fl.mutual.lv_term, true}, {fl.mutual.gv_term, false}}) {
						if (!term.defined()) continue;
						const auto [t, s] = detail::probe_term(model, term, lv_teaches);
						rec.teacher_grad_max = std::max(rec.teacher_grad_max, t);
						rec.student_grad_max = std::max(rec.student_grad_max, s);
					}
				}
				ad::backward(ad::scale(fl.total, inv));
				rec.loss.bce += fl.report.bce;
				rec.loss.asl += fl.report.asl;
				rec.loss.mutual += fl.report.mutual;
				rec.loss.total += fl.report.total;
				rec.loss.active_teachers = fl.report.active_teachers;
			}
			const double n = static_cast<double>(e - b);
			rec.loss.bce /= n;
			rec.loss.asl /= n;
			rec.loss.mutual /= n;
			rec.loss.total /= n;
			opt.step(model.parameters(), lr);
			result.steps.push_back(rec);
			if (on_step) on_step(rec);
			++step;
		}
		if (cfg.eval_each_epoch || epoch + 1 == cfg.epochs) {
			EpochRecord er{epoch, evaluate(model, samples, data.val, resolution)};
			result.epochs.push_back(er);
			if (on_epoch) on_epoch(er);
		}
	}
	result.final_eval = result.epochs.empty() ? EvalReport{} : result.epochs.back().eval;
	return result;
}

// JSON-lines writer for the step and epoch records.
inline std::string jsonl(const StepRecord& r) {
	nlohmann::json j = to_json_value(r);
	j["type"] = "step";
	return j.dump();
}
inline std::string jsonl(const EpochRecord& r) {
	nlohmann::json j = to_json_value(r);
	j["type"] = "epoch";
	return j.dump();
}
inline StepCallback jsonl_step_writer(std::ostream& os) {
	return [&os](const StepRecord& r) { os << jsonl(r) << '\n'; };
}
inline EpochCallback jsonl_epoch_writer(std::ostream& os) {
	return [&os](const EpochRecord& r) { os << jsonl(r) << '\n'; };
}

// --------------------------------------------------------------- checkpoint
//
// Layout: u64 little-endian header length, JSON header, then every parameter
// as little-endian float32 in manifest order.

struct CheckpointHeader {
	ModelConfig model;
	int epoch = 0;
	std::uint64_t seed = 0;
	nlohmann::json extra;  // training config snapshot etc.
};

namespace detail {

inline void put_le64(std::string& s, std::uint64_t v) {
	for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& s, float f) {
	std::uint32_t u;
	std::memcpy(&u, &f, 4);
	for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline float get_f32(const unsigned char* p) {
	const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
	                        static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
	float f;
	std::memcpy(&f, &u, 4);
	return f;
}

} // namespace detail

template <class T>
std::string encode_checkpoint(const BiMapperModel<T>& model, const CheckpointHeader& h) {
	nlohmann::json params = nlohmann::json::array();
	std::size_t offset = 0;
	for (const auto& p : model.parameters()) {
		params.push_back({{"name", p.name}, {"stream", stream_name(p.stream)}, {"shape", p.tensor.shape()},
		                  {"offset", offset}});
		offset += p.tensor.size();
	}
	const nlohmann::json header = {{"format", "bimapper-checkpoint"},
	                               {"version", 1},
	                               {"dtype", "float32-le"},
	                               {"model", model.config()},
	                               {"epoch", h.epoch},
	                               {"seed", h.seed},
	                               {"train", h.extra},
	                               {"parameters", params},
	                               {"count", offset}};
	const std::string hs = header.dump();
	std::string out;
	out.reserve(8 + hs.size() + 4 * offset);
	detail::put_le64(out, hs.size());
	out += hs;
	for (const auto& p : model.parameters()) {
		for (T v : p.tensor.values()) detail::put_f32(out, static_cast<float>(v));
	}
	return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const BiMapperModel<T>& model, const CheckpointHeader& h) {
	io::write_file(path, encode_checkpoint(model, h));
}

struct LoadedCheckpoint {
	CheckpointHeader header;
	nlohmann::json json;
	std::string blob;
};

inline LoadedCheckpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>") {
	if (bytes.size() < 8) throw IoError(origin + ": truncated checkpoint");
	std::uint64_t n = 0;
	for (int i = 7; i >= 0; --i) n = (n << 8) | static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
	if (n > bytes.size() - 8) throw IoError(origin + ": checkpoint header overruns the file");
	LoadedCheckpoint c;
	try {
		c.json = nlohmann::json::parse(bytes.substr(8, n));
		c.json.at("model").get_to(c.header.model);
		c.header.epoch = c.json.at("epoch").get<int>();
		c.header.seed = c.json.at("seed").get<std::uint64_t>();
		c.header.extra = c.json.value("train", nlohmann::json::object());
	} catch (const nlohmann::json::exception& e) {
		throw IoError(origin + ": malformed checkpoint header: " + e.what());
	}
	c.blob = bytes.substr(8 + n);
	return c;
}

// Copies the checkpoint weights into `model`, which must have the same
// architecture and parameter manifest.
template <class T>
void apply_checkpoint(BiMapperModel<T>& model, const LoadedCheckpoint& c) {
	if (!model.config().same_architecture(c.header.model)) {
		throw ArchMismatch("checkpoint architecture differs from the model configuration");
	}
	const auto& manifest = c.json.at("parameters");
	auto& params = model.parameters();
	if (manifest.size() != params.size()) throw ArchMismatch("checkpoint parameter count differs");
	for (std::size_t i = 0; i < params.size(); ++i) {
		const auto& m = manifest[i];
		auto& p = params[i];
		if (m.at("name").get<std::string>() != p.name || m.at("shape").get<ad::Shape>() != p.tensor.shape()) {
			throw ArchMismatch("checkpoint parameter " + m.at("name").get<std::string>() + " does not match " +
			                   p.name);
		}
		const std::size_t off = m.at("offset").get<std::size_t>();
		if ((off + p.tensor.size()) * 4 > c.blob.size()) throw IoError("checkpoint blob is truncated");
		const auto* raw = reinterpret_cast<const unsigned char*>(c.blob.data()) + off * 4;
		auto dst = p.tensor.data();
		for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(detail::get_f32(raw + 4 * k));
	}
}

template <class T = float>
BiMapperModel<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
	const LoadedCheckpoint c = decode_checkpoint(io::read_file(path), path.string());
	if (expected && !expected->same_architecture(c.header.model)) {
		throw ArchMismatch(path.string() + ": checkpoint architecture differs from the dataset configuration");
	}
	BiMapperModel<T> model(c.header.model, 0);
	apply_checkpoint(model, c);
	return model;
}

} // namespace bimapper

#endif
