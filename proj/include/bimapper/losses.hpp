#ifndef BIMAPPER_LOSSES_HPP
#define BIMAPPER_LOSSES_HPP

// Training objective: ego-frame BCE, the per-view camera-frame cross-entropy
// (across-space loss), the teacher/student foreground mutual loss with its
// asynchronous schedule, and their weighted total.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bimapper/autodiff.hpp"
#include "bimapper/error.hpp"
#include "bimapper/grid.hpp"

namespace bimapper {

enum class MutualForm { CE, KL, L2 };
enum class TeacherMode { LvOnly, GvOnly, Synchronous, Asynchronous };

inline const char* to_string(MutualForm f) {
	switch (f) {
	case MutualForm::CE: return "ce";
	case MutualForm::KL: return "kl";
	case MutualForm::L2: return "l2";
	}
	return "?";
}

inline const char* to_string(TeacherMode m) {
	switch (m) {
	case TeacherMode::LvOnly: return "lv";
	case TeacherMode::GvOnly: return "gv";
	case TeacherMode::Synchronous: return "sync";
	case TeacherMode::Asynchronous: return "async";
	}
	return "?";
}

inline MutualForm parse_mutual_form(const std::string& s) {
	if (s == "ce") return MutualForm::CE;
	if (s == "kl") return MutualForm::KL;
	if (s == "l2") return MutualForm::L2;
	throw InvalidArgument("unknown mutual loss form '" + s + "'");
}

inline TeacherMode parse_teacher_mode(const std::string& s) {
	if (s == "lv") return TeacherMode::LvOnly;
	if (s == "gv") return TeacherMode::GvOnly;
	if (s == "sync") return TeacherMode::Synchronous;
	if (s == "async") return TeacherMode::Asynchronous;
	throw InvalidArgument("unknown teacher mode '" + s + "'");
}

struct LossConfig {
	double alpha = 0.1;
	int aml_start_epoch = 5;
	MutualForm mutual_form = MutualForm::CE;
	double fg_threshold = 0.5;
	bool ablate_asl = false;
	bool ablate_aml = false;
	TeacherMode teacher_mode = TeacherMode::Asynchronous;

	void validate() const {
		if (!(alpha >= 0.0)) throw InvalidArgument("alpha must be non-negative");
		if (aml_start_epoch < 0) throw InvalidArgument("aml start epoch must be non-negative");
		if (!(fg_threshold > 0.0 && fg_threshold < 1.0)) throw InvalidArgument("fg_threshold must be in (0,1)");
	}
};

// Which streams act as teacher in a given epoch.
struct Teachers {
	bool lv = false;
	bool gv = false;
	bool operator==(const Teachers&) const = default;
};

inline Teachers active_teachers(int epoch, const LossConfig& cfg) {
	switch (cfg.teacher_mode) {
	case TeacherMode::LvOnly: return {true, false};
	case TeacherMode::GvOnly: return {false, true};
	case TeacherMode::Synchronous: return {true, true};
	case TeacherMode::Asynchronous: return {true, epoch >= cfg.aml_start_epoch};
	}
	return {};
}

inline constexpr double kProbClamp = 1e-7;

namespace detail {

// Mean over the masked entries of a constant-weighted sum; zero when the mask
// is empty.
template <class T>
ad::Tensor<T> masked_mean(const ad::Tensor<T>& terms, double count) {
	const ad::Tensor<T> s = ad::sum(terms);
	return ad::scale(s, count > 0.0 ? static_cast<T>(-1.0 / count) : T(0));
}

} // namespace detail

// Mean binary cross-entropy of per-class probabilities [C,H,W] (channel c is
// class c+1) against a class grid, over non-VOID cells and all classes.
template <class T>
ad::Tensor<T> bce_loss(const ad::Tensor<T>& probs, const SemanticGrid& gt) {
	if (probs.shape().size() != 3 || probs.dim(1) != static_cast<std::size_t>(gt.height) ||
	    probs.dim(2) != static_cast<std::size_t>(gt.width)) {
		throw ShapeMismatch("bce_loss: probs " + ad::to_string(probs.shape()) + " vs grid " +
		                    std::to_string(gt.height) + "x" + std::to_string(gt.width));
	}
	const std::size_t nc = probs.dim(0), hw = gt.size();
	std::vector<T> pos(nc * hw, T(0)), neg(nc * hw, T(0));
	double count = 0.0;
	for (std::size_t i = 0; i < hw; ++i) {
		const ClassId g = gt.data[i];
		if (g == classes::kVoid) continue;
		count += static_cast<double>(nc);
		for (std::size_t c = 0; c < nc; ++c) {
			(g == c + 1 ? pos : neg)[c * hw + i] = T(1);
		}
	}
	const T lo = static_cast<T>(kProbClamp), hi = static_cast<T>(1.0 - kProbClamp);
	const auto shape = probs.shape();
	const ad::Tensor<T> lp = ad::log_clamped(probs, lo, hi);
	const ad::Tensor<T> lq = ad::log_clamped(ad::affine(probs, T(-1), T(1)), lo, hi);
	const ad::Tensor<T> terms = ad::add(ad::mul(lp, ad::Tensor<T>::constant(shape, std::move(pos))),
	                                    ad::mul(lq, ad::Tensor<T>::constant(shape, std::move(neg))));
	return detail::masked_mean(terms, count);
}

// Sum over views of the mean softmax cross-entropy between camera-frame
// logits [K,H,W] and the camera-frame ground truth, VOID excluded.
template <class T>
ad::Tensor<T> across_space_loss(std::span<const ad::Tensor<T>> logits, std::span<const SemanticGrid> gts) {
	if (logits.size() != gts.size()) {
		throw ViewCountMismatch(std::to_string(logits.size()) + " logit maps vs " + std::to_string(gts.size()) +
		                        " ground-truth grids");
	}
	ad::Tensor<T> total;
	for (std::size_t v = 0; v < logits.size(); ++v) {
		const ad::Tensor<T>& lg = logits[v];
		const SemanticGrid& gt = gts[v];
		if (lg.shape().size() != 3 || lg.dim(1) != static_cast<std::size_t>(gt.height) ||
		    lg.dim(2) != static_cast<std::size_t>(gt.width)) {
			throw ShapeMismatch("across_space_loss view " + std::to_string(v) + ": logits " +
			                    ad::to_string(lg.shape()) + " vs grid " + std::to_string(gt.height) + "x" +
			                    std::to_string(gt.width));
		}
		const std::size_t hw = gt.size();
		std::vector<T> target(lg.size(), T(0));
		double count = 0.0;
		for (std::size_t i = 0; i < hw; ++i) {
			const ClassId g = gt.data[i];
			if (g >= lg.dim(0)) continue;
			target[g * hw + i] = T(1);
			count += 1.0;
		}
		const ad::Tensor<T> term = detail::masked_mean(
		    ad::mul(ad::log_softmax_channel(lg), ad::Tensor<T>::constant(lg.shape(), std::move(target))), count);
		total = total.defined() ? ad::add(total, term) : term;
	}
	return total.defined() ? total : ad::Tensor<T>::scalar(T(0));
}

// Divergence of a student probability map from a (detached) teacher map,
// averaged over `mask` cells (all cells when no mask is given).
template <class T>
ad::Tensor<T> mutual_divergence(const ad::Tensor<T>& student, const ad::Tensor<T>& teacher_probs, MutualForm form,
                                double threshold, const std::vector<T>* mask = nullptr) {
	if (student.shape() != teacher_probs.shape()) {
		throw ShapeMismatch("mutual loss: " + ad::to_string(student.shape()) + " vs " +
		                    ad::to_string(teacher_probs.shape()));
	}
	const std::size_t n = student.size();
	std::vector<T> m(n, T(1));
	if (mask) m = *mask;
	double count = 0.0;
	for (T x : m) count += static_cast<double>(x);
	const ad::Tensor<T> mask_t = ad::Tensor<T>::constant(student.shape(), m);
	const ad::Tensor<T> t = ad::stop_gradient(teacher_probs);
	const T lo = static_cast<T>(kProbClamp), hi = static_cast<T>(1.0 - kProbClamp);

	if (form == MutualForm::L2) {
		const ad::Tensor<T> d = ad::sub(student, t);
		return ad::scale(ad::sum(ad::mul(ad::mul(d, d), mask_t)), count > 0 ? static_cast<T>(1.0 / count) : T(0));
	}

	std::vector<T> target(n);
	for (std::size_t i = 0; i < n; ++i) {
		target[i] = form == MutualForm::CE ? (t[i] > static_cast<T>(threshold) ? T(1) : T(0)) : t[i];
	}
	std::vector<T> pos(n), neg(n);
	for (std::size_t i = 0; i < n; ++i) {
		pos[i] = m[i] * target[i];
		neg[i] = m[i] * (T(1) - target[i]);
	}
	const ad::Tensor<T> lp = ad::log_clamped(student, lo, hi);
	const ad::Tensor<T> lq = ad::log_clamped(ad::affine(student, T(-1), T(1)), lo, hi);
	ad::Tensor<T> cross = ad::add(ad::mul(lp, ad::Tensor<T>::constant(student.shape(), pos)),
	                              ad::mul(lq, ad::Tensor<T>::constant(student.shape(), neg)));
	ad::Tensor<T> loss = detail::masked_mean(cross, count);
	if (form == MutualForm::KL) {
		// teacher entropy makes KL vanish at agreement
		double ent = 0.0;
		for (std::size_t i = 0; i < n; ++i) {
			const double p = std::clamp(static_cast<double>(target[i]), kProbClamp, 1.0 - kProbClamp);
			ent += static_cast<double>(m[i]) * (p * std::log(p) + (1.0 - p) * std::log(1.0 - p));
		}
		loss = ad::affine(loss, T(1), count > 0 ? static_cast<T>(ent / count) : T(0));
	}
	return loss;
}

template <class T>
struct MutualTerms {
	ad::Tensor<T> total;    // sum of the active terms
	ad::Tensor<T> lv_term;  // LV teaches GV; undefined when inactive
	ad::Tensor<T> gv_term;  // GV teaches LV; undefined when inactive
	Teachers teachers;
};

// Mutual loss of the foreground maps for `epoch`. The teacher side of every
// term is detached.
template <class T>
MutualTerms<T> mutual_loss(const ad::Tensor<T>& fg_gv, const ad::Tensor<T>& fg_lv, int epoch, const LossConfig& cfg,
                           const std::vector<T>* mask = nullptr) {
	MutualTerms<T> out;
	out.teachers = active_teachers(epoch, cfg);
	if (out.teachers.lv) {
		out.lv_term = mutual_divergence(fg_gv, fg_lv, cfg.mutual_form, cfg.fg_threshold, mask);
		out.total = out.lv_term;
	}
	if (out.teachers.gv) {
		out.gv_term = mutual_divergence(fg_lv, fg_gv, cfg.mutual_form, cfg.fg_threshold, mask);
		out.total = out.total.defined() ? ad::add(out.total, out.gv_term) : out.gv_term;
	}
	if (!out.total.defined()) out.total = ad::Tensor<T>::scalar(T(0));
	return out;
}

struct LossReport {
	double bce = 0.0;
	double asl = 0.0;
	double mutual = 0.0;
	double total = 0.0;
	Teachers active_teachers;
};

inline double combine_total(double bce, double asl, double mutual, const LossConfig& cfg) {
	return bce + (cfg.ablate_asl ? 0.0 : asl) + (cfg.ablate_aml ? 0.0 : cfg.alpha * mutual);
}

template <class T>
struct LossParts {
	ad::Tensor<T> bce;
	ad::Tensor<T> asl;
	ad::Tensor<T> mutual;
	Teachers teachers;
};

// Weighted total. Ablated terms are reported but kept out of the graph, so
// they contribute neither value nor gradient.
template <class T>
std::pair<ad::Tensor<T>, LossReport> total_loss(const LossParts<T>& parts, const LossConfig& cfg) {
	ad::Tensor<T> total = parts.bce;
	if (!cfg.ablate_asl && parts.asl.defined()) total = ad::add(total, parts.asl);
	if (!cfg.ablate_aml && parts.mutual.defined() && cfg.alpha != 0.0) {
		total = ad::add(total, ad::scale(parts.mutual, static_cast<T>(cfg.alpha)));
	}
	LossReport r;
	r.bce = static_cast<double>(parts.bce.item());
	r.asl = parts.asl.defined() ? static_cast<double>(parts.asl.item()) : 0.0;
	r.mutual = parts.mutual.defined() ? static_cast<double>(parts.mutual.item()) : 0.0;
	r.total = static_cast<double>(total.item());
	r.active_teachers = cfg.ablate_aml ? Teachers{} : parts.teachers;
	return {total, r};
}

} // namespace bimapper

#endif
