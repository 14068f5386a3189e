// bimapper: dataset generation, training, evaluation and map export.
// Exit codes: 0 ok, 1 usage/config, 2 numeric failure, 3 I/O failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "bimapper/dataset.hpp"
#include "bimapper/io.hpp"
#include "bimapper/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bimapper;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitIo = 3;

// Object id git would give the bytes as a blob.
std::string git_blob_sha1(const std::string& bytes) {
	const std::string blob = "blob " + std::to_string(bytes.size()) + '\0' + bytes;
	unsigned char md[EVP_MAX_MD_SIZE];
	unsigned int n = 0;
	if (EVP_Digest(blob.data(), blob.size(), md, &n, EVP_sha1(), nullptr) != 1) {
		throw IoError("sha1 digest failed");
	}
	std::string hex;
	char buf[3];
	for (unsigned int i = 0; i < n; ++i) {
		std::snprintf(buf, sizeof buf, "%02x", md[i]);
		hex += buf;
	}
	return hex;
}

std::string dataset_hash(const fs::path& data) { return git_blob_sha1(io::read_file(data / "manifest.json")); }

struct Invocation {
	std::vector<std::string> argv;
};

void write_run_manifest(const fs::path& dir, const Invocation& inv, const std::string& command, const json& config,
                        std::uint64_t seed, const std::string& data_hash, const json& outputs) {
	std::string line;
	for (const auto& a : inv.argv) line += (line.empty() ? "" : " ") + a;
	io::write_json(dir / "run_manifest.json", {{"command", command},
	                                           {"command_line", line},
	                                           {"argv", inv.argv},
	                                           {"config", config},
	                                           {"seed", seed},
	                                           {"dataset_sha1", data_hash},
	                                           {"outputs", outputs}});
}

fs::path parent_or_cwd(const fs::path& p) { return p.has_parent_path() ? p.parent_path() : fs::path("."); }

void ensure_dir(const fs::path& dir) {
	std::error_code ec;
	fs::create_directories(dir, ec);
	if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// ------------------------------------------------------------------ gen

struct GenArgs {
	int scenes = 64;
	int views = 4;
	std::uint64_t seed = 1;
	std::string out;
};

int run_gen(const GenArgs& a, const Invocation& inv) {
	WorldConfig world = WorldConfig::desk();
	world.rig.views = a.views;
	const Dataset d = make_dataset(world, static_cast<std::size_t>(a.scenes), a.seed, worker_count());
	io::write_dataset(a.out, d);
	write_run_manifest(a.out, inv, "gen", {{"scenes", a.scenes}, {"views", a.views}, {"world", world}}, a.seed,
	                   dataset_hash(a.out), {{"dataset", a.out}});
	std::cout << "wrote " << d.frames.size() << " scenes (" << d.train.size() << " train, " << d.val.size()
	          << " val) to " << a.out << "\n";
	return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
	std::string data;
	std::string out;
	TrainConfig tc;
	std::string mutual = "ce";
	std::string teacher = "async";
	double fuse_gv = 1.0;
	double fuse_lv = 0.1;
	bool no_asl = false;
	bool no_aml = false;
};

int run_train(TrainArgs a, const Invocation& inv) {
	a.tc.loss.mutual_form = parse_mutual_form(a.mutual);
	a.tc.loss.teacher_mode = parse_teacher_mode(a.teacher);
	a.tc.loss.ablate_asl = a.no_asl;
	a.tc.loss.ablate_aml = a.no_aml;
	a.tc.validate();

	const Dataset d = io::read_dataset(a.data);
	ModelConfig mc = ModelConfig::for_world(d.world);
	mc.fuse_gv = a.fuse_gv;
	mc.fuse_lv = a.fuse_lv;
	mc.validate();

	const fs::path ckpt(a.out);
	const fs::path dir = parent_or_cwd(ckpt);
	ensure_dir(dir);
	fs::path log_path = ckpt;
	log_path.replace_extension(".jsonl");
	std::ofstream log(log_path, std::ios::binary);
	if (!log) throw IoError("cannot open " + log_path.string());

	const auto samples = prepare_samples<float>(d, mc);
	BiMapperModel<float> model(mc, a.tc.seed);
	const TrainResult r = train(model, d, samples, a.tc, jsonl_step_writer(log), jsonl_epoch_writer(log));
	log.close();
	if (!log) throw IoError("failed writing " + log_path.string());

	const json config = {{"train", to_json_value(a.tc)}, {"model", mc}};
	save_checkpoint(ckpt, model, {mc, a.tc.epochs, a.tc.seed, to_json_value(a.tc)});
	write_run_manifest(dir, inv, "train", config, a.tc.seed, dataset_hash(a.data),
	                   {{"checkpoint", ckpt.string()}, {"log", log_path.string()}});
	std::cout << "val " << to_json(r.final_eval).dump() << "\n";
	return 0;
}

// ----------------------------------------------------------------- eval

struct EvalArgs {
	std::string data;
	std::string ckpt;
	std::string report;
	std::string csv;
	bool oracle = false;
};

int run_eval(const EvalArgs& a, const Invocation& inv) {
	if (!a.oracle && a.ckpt.empty()) throw InvalidArgument("--ckpt is required unless --oracle is given");
	const Dataset d = io::read_dataset(a.data);
	if (d.val.empty()) throw DatasetEmpty(a.data + ": validation split is empty");
	const double res = d.world.grid.resolution;
	EvalReport report;
	json config = {{"oracle", a.oracle}};
	std::uint64_t seed = 0;
	if (a.oracle) {
		Evaluator ev(res);
		for (auto i : d.val) ev.add(d.frames[i].ego_gt, d.frames[i].ego_gt);
		report = ev.report();
	} else {
		const ModelConfig expected = ModelConfig::for_world(d.world);
		const LoadedCheckpoint c = decode_checkpoint(io::read_file(a.ckpt), a.ckpt);
		if (!expected.same_architecture(c.header.model)) {
			throw ArchMismatch(a.ckpt + ": checkpoint architecture differs from the dataset configuration");
		}
		BiMapperModel<float> model(c.header.model, 0);
		apply_checkpoint(model, c);
		const auto samples = prepare_samples<float>(d, c.header.model);
		report = evaluate(model, samples, d.val, res);
		config["checkpoint"] = a.ckpt;
		config["model"] = c.header.model;
		seed = c.header.seed;
	}
	const fs::path out(a.report);
	ensure_dir(parent_or_cwd(out));
	io::write_json(out, to_json(report));
	json outputs = {{"report", a.report}};
	if (!a.csv.empty()) {
		ensure_dir(parent_or_cwd(a.csv));
		io::write_file(a.csv, to_csv(report));
		outputs["csv"] = a.csv;
	}
	write_run_manifest(parent_or_cwd(out), inv, "eval", config, seed, dataset_hash(a.data), outputs);
	std::cout << to_json(report).dump() << "\n";
	return 0;
}

// ------------------------------------------------------------- ipm-warp

struct WarpArgs {
	std::string image;
	std::string cams;
	int view = 0;
	std::string out;
};

int run_warp(const WarpArgs& a, const Invocation& inv) {
	const io::Calibration cal = io::read_cams(a.cams);
	if (a.view < 0 || static_cast<std::size_t>(a.view) >= cal.views.size()) {
		throw InvalidArgument("view " + std::to_string(a.view) + " not in calibration with " +
		                      std::to_string(cal.views.size()) + " views");
	}
	const SemanticGrid image = io::decode_pgm(io::read_file(a.image), a.image);
	const SemanticGrid warped = ipm_warp(image, cal.views[static_cast<std::size_t>(a.view)].intrinsics, cal.ipm);
	const fs::path out(a.out);
	ensure_dir(parent_or_cwd(out));
	io::write_grid(out, warped, "camera_" + std::to_string(a.view));
	write_run_manifest(parent_or_cwd(out), inv, "ipm-warp",
	                   {{"image", a.image}, {"cams", a.cams}, {"view", a.view}, {"ipm", cal.ipm}}, 0, "",
	                   {{"warped", a.out}});
	return 0;
}

// ----------------------------------------------------------- export-map

struct ExportArgs {
	std::string ckpt;
	std::string data;
	int frame = 0;
	std::string out;
};

int run_export(const ExportArgs& a, const Invocation& inv) {
	const Dataset d = io::read_dataset(a.data);
	if (a.frame < 0 || static_cast<std::size_t>(a.frame) >= d.frames.size()) {
		throw InvalidArgument("frame " + std::to_string(a.frame) + " not in dataset of " +
		                      std::to_string(d.frames.size()));
	}
	const ModelConfig expected = ModelConfig::for_world(d.world);
	const BiMapperModel<float> model = load_checkpoint<float>(a.ckpt, &expected);
	// only the requested frame is prepared
	Dataset one = d;
	one.frames = {d.frames[static_cast<std::size_t>(a.frame)]};
	one.seeds = {d.seeds[static_cast<std::size_t>(a.frame)]};
	const auto samples = prepare_samples<float>(one, model.config());
	const StreamOutputs<float> out = model.forward(samples[0].input);
	const SemanticGrid pred = to_semantic_grid(out.probs, samples[0].ego_gt.metric());
	const fs::path png(a.out);
	ensure_dir(parent_or_cwd(png));
	io::write_file(png, io::encode_png(pred));
	write_run_manifest(parent_or_cwd(png), inv, "export-map", {{"checkpoint", a.ckpt}, {"frame", a.frame}}, 0,
	                   dataset_hash(a.data), {{"png", a.out}});
	return 0;
}

int exit_code(const Error& e) {
	switch (e.category()) {
	case Error::Category::Usage: return kExitUsage;
	case Error::Category::Numeric: return kExitNumeric;
	case Error::Category::Io: return kExitIo;
	}
	return kExitUsage;
}

} // namespace

int main(int argc, char** argv) {
	CLI::App app{"Dual-stream BEV semantic mapping on a synthetic world"};
	app.require_subcommand(1);
	Invocation inv{std::vector<std::string>(argv, argv + argc)};

	GenArgs gen;
	auto* g = app.add_subcommand("gen", "generate a synthetic dataset");
	g->add_option("--scenes", gen.scenes, "number of scenes")->check(CLI::PositiveNumber);
	g->add_option("--views", gen.views, "cameras per scene")->check(CLI::PositiveNumber);
	g->add_option("--seed", gen.seed, "base seed");
	g->add_option("--out", gen.out, "output directory")->required();

	TrainArgs tr;
	auto* t = app.add_subcommand("train", "train a model");
	t->add_option("--data", tr.data, "dataset directory")->required();
	t->add_option("--out", tr.out, "checkpoint path")->required();
	t->add_option("--epochs", tr.tc.epochs)->check(CLI::PositiveNumber);
	t->add_option("--lr", tr.tc.lr)->check(CLI::PositiveNumber);
	t->add_option("--lr-decay-epoch", tr.tc.lr_decay_epoch);
	t->add_option("--batch", tr.tc.batch_size)->check(CLI::PositiveNumber);
	t->add_option("--aml-start", tr.tc.loss.aml_start_epoch)->check(CLI::NonNegativeNumber);
	t->add_option("--alpha", tr.tc.loss.alpha, "auxiliary loss weight")->check(CLI::NonNegativeNumber);
	t->add_option("--mutual-loss", tr.mutual)->check(CLI::IsMember({"ce", "kl", "l2"}));
	t->add_option("--teacher", tr.teacher)->check(CLI::IsMember({"lv", "gv", "sync", "async"}));
	t->add_option("--fuse-gv", tr.fuse_gv);
	t->add_option("--fuse-lv", tr.fuse_lv);
	t->add_flag("--no-asl", tr.no_asl, "drop the auxiliary segmentation loss");
	t->add_flag("--no-aml", tr.no_aml, "drop the mutual loss");
	t->add_option("--seed", tr.tc.seed, "model init and shuffle seed");

	EvalArgs ev;
	auto* e = app.add_subcommand("eval", "evaluate on the validation split");
	e->add_option("--data", ev.data)->required();
	e->add_option("--ckpt", ev.ckpt);
	e->add_option("--report", ev.report, "JSON report path")->required();
	e->add_option("--csv", ev.csv);
	e->add_flag("--oracle", ev.oracle, "score the ground truth against itself");

	WarpArgs wa;
	auto* w = app.add_subcommand("ipm-warp", "warp a class image onto the ground plane");
	w->add_option("--image", wa.image)->required();
	w->add_option("--cams", wa.cams)->required();
	w->add_option("--view", wa.view)->required();
	w->add_option("--out", wa.out)->required();

	ExportArgs ex;
	auto* x = app.add_subcommand("export-map", "render a predicted map as PNG");
	x->add_option("--ckpt", ex.ckpt)->required();
	x->add_option("--data", ex.data)->required();
	x->add_option("--frame", ex.frame)->required();
	x->add_option("--out", ex.out)->required();

	try {
		app.parse(argc, argv);
	} catch (const CLI::ParseError& err) {
		const int rc = app.exit(err);
		return rc == 0 ? 0 : kExitUsage;
	}

	try {
		if (*g) return run_gen(gen, inv);
		if (*t) return run_train(tr, inv);
		if (*e) return run_eval(ev, inv);
		if (*w) return run_warp(wa, inv);
		if (*x) return run_export(ex, inv);
	} catch (const Error& err) {
		std::cerr << "error: " << err.what() << "\n";
		return exit_code(err);
	} catch (const std::exception& err) {
		std::cerr << "error: " << err.what() << "\n";
		return kExitIo;
	}
	return kExitUsage;
}
