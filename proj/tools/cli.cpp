#include "tss/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tss/checkpoint.hpp"
#include "tss/config.hpp"
#include "tss/corpus.hpp"
#include "tss/decoding.hpp"
#include "tss/kernels.hpp"
#include "tss/lattice.hpp"
#include "tss/training.hpp"
#include "tss/version.hpp"

namespace tss {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Usage problems detected after argument parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

void AddCommon(CLI::App* app, Common& c, bool config_options = true) {
  if (config_options) {
    app->add_option("-c,--config", c.config, "TOML config file");
    app->add_option("--set", c.overrides, "Override a config key, e.g. ss.lambda=0.5")
        ->allow_extra_args(false);
  }
  app->add_option("-o,--out", c.out, "Output directory")->required();
}

RunConfig Resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw UsageError("config file not found: " + c.config);
    cfg = load_config(c.config);
  }
  apply_overrides(cfg, c.overrides);
  return cfg;
}

std::string CommandLine(int argc, const char* const* argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i > 0) s += ' ';
    s += argv[i];
  }
  return s;
}

void Stamp(const fs::path& out, const RunConfig& cfg, const std::string& command) {
  fs::create_directories(out);
  std::ofstream(out / "config.resolved.toml") << config_to_toml(cfg);
  json v = {{"tool", "tss"},
            {"version", kVersion},
            {"checkpoint_format", kCheckpointVersion},
            {"command", command}};
  std::ofstream(out / "version.json") << v.dump(2) << '\n';
}

std::vector<TokenSequence> Transcripts(const std::vector<Utterance>& utts) {
  std::vector<TokenSequence> out;
  out.reserve(utts.size());
  for (const Utterance& u : utts) out.push_back(u.reference);
  return out;
}

const std::vector<Utterance>& Split(const Dataset& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "dev") return d.dev;
  if (name == "test") return d.test;
  throw UsageError("unknown split '" + name + "' (train, dev, test)");
}

json ArrayJson(const Array& a) {
  json rows = json::array();
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    json row = json::array();
    for (double v : a.row(i)) row.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    rows.push_back(row);
  }
  return rows;
}

std::optional<ElmModel> LoadElm(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return unpack_elm(read_checkpoint(path));
}

// ---- subcommands ------------------------------------------------------------------

int Generate(const Common& c, const std::string& spec_name, const std::string& cmd,
             std::ostream& out) {
  RunConfig cfg;
  if (spec_name == "tiny") {
    cfg.synth.vocab_size = 6;
    cfg.synth.utterances = 200;
    cfg.synth.min_tokens = 2;
    cfg.synth.max_tokens = 5;
    cfg.synth.successors = 3;
  } else if (spec_name != "default") {
    throw UsageError("--spec must be 'default' or 'tiny'");
  }
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw UsageError("config file not found: " + c.config);
    const RunConfig file = load_config(c.config);
    cfg.synth = file.synth;
  }
  apply_overrides(cfg, c.overrides);
  const SynthCorpus corpus = generate(cfg.synth);
  write_dataset(corpus.data, c.out, &cfg.synth);
  Stamp(c.out, cfg, cmd);
  out << "generated " << corpus.data.train.size() << " train / " << corpus.data.dev.size()
      << " dev / " << corpus.data.test.size() << " test utterances in " << c.out << '\n';
  return kExitOk;
}

int PretrainElm(const Common& c, const std::string& data_dir, const std::string& cmd,
                std::ostream& out) {
  const RunConfig cfg = Resolve(c);
  const Dataset d = read_dataset(data_dir);
  Stamp(c.out, cfg, cmd);
  const auto train = Transcripts(d.train), dev = Transcripts(d.dev);
  const ElmTrainResult r = pretrain_elm(train, dev, cfg.model, d.vocab, cfg.elm, &out);
  Checkpoint ck = pack_model(r.model);
  ck.meta["dev_ce"] = r.dev_ce.empty() ? json(nullptr) : json(r.dev_ce.back());
  write_checkpoint(ck, fs::path(c.out) / "elm.ckpt");
  std::ofstream log(fs::path(c.out) / "metrics.jsonl");
  for (std::size_t e = 0; e < r.train_ce.size(); ++e) {
    const double dev_ce = r.dev_ce[e];
    log << json{{"type", "epoch"},
                {"epoch", e},
                {"train_ce", r.train_ce[e]},
                {"dev_ce", std::isfinite(dev_ce) ? json(dev_ce) : json(nullptr)},
                {"dev_perplexity", std::isfinite(dev_ce) ? json(std::exp(dev_ce)) : json(nullptr)}}
               .dump()
        << '\n';
  }
  // Proficiency of the LM's argmax on training transcripts, for reference.
  std::size_t hits = 0, total = 0;
  const auto excluded = excluded_classes(d.vocab);
  for (const auto& y : train) {
    const TokenSequence best =
        argmax_tokens(SamplingMatrix{elm_forward(y, r.model.params), SamplingSource::kElm}, excluded);
    for (std::size_t u = 0; u < y.size(); ++u) hits += best[u] == y[u];
    total += y.size();
  }
  const double acc = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  log << json{{"type", "summary"}, {"train_proficiency", acc}}.dump() << '\n';
  out << "external LM written to " << (fs::path(c.out) / "elm.ckpt").string()
      << "  (train proficiency " << acc << ")\n";
  return kExitOk;
}

int Train(const Common& c, const std::string& data_dir, const std::string& elm_path, bool resume,
          const std::string& cmd, std::ostream& out) {
  const RunConfig cfg = Resolve(c);
  const Dataset d = read_dataset(data_dir);
  const auto elm = LoadElm(elm_path);
  if (cfg.train.policy.level != SsLevel::kOff && cfg.train.policy.source == SamplingSource::kElm &&
      !elm) {
    throw UsageError("ss.source=elm needs --elm <checkpoint>");
  }
  Stamp(c.out, cfg, cmd);
  TrainOptions o;
  o.out_dir = c.out;
  o.progress = &out;
  o.dev_decode = cfg.decode;
  if (resume) {
    const fs::path last = fs::path(c.out) / "last.ckpt";
    if (!fs::exists(last)) throw UsageError("--resume: no last.ckpt in " + c.out);
    o.resume = last;
  }
  const TrainResult r = train(d, cfg.model, cfg.train, elm ? &*elm : nullptr, o);
  out << "best dev error " << r.state.best_dev << " at epoch " << r.state.best_epoch << "; "
      << r.state.step << " steps; checkpoints in " << c.out << '\n';
  return kExitOk;
}

struct DecodeSummary {
  std::size_t utterances = 0;
  EditOps ops;
  std::size_t ref_tokens = 0;
  double error_rate() const {
    return ref_tokens ? static_cast<double>(ops.total()) / static_cast<double>(ref_tokens) : 0.0;
  }
};

DecodeSummary DecodeSplit(const RnntModel& model, const ElmModel* elm, const DecodeConfig& dc,
                          const std::vector<Utterance>& utts, bool greedy, std::ostream& lines) {
  DecodeSummary s;
  for (const Utterance& u : utts) {
    json line = {{"utt_id", u.id}};
    TokenSequence hyp;
    if (greedy) {
      hyp = greedy_decode(u.features, model, dc);
      line["search"] = "greedy";
    } else {
      const auto ranked = beam_decode(u.features, model, elm, dc);
      const Hypothesis& best = ranked.front();
      hyp = best.tokens;
      line["search"] = "beam";
      line["score"] = {{"rnnt", best.score_rnnt},
                       {"lm", elm ? json(best.score_lm) : json(nullptr)},
                       {"ilm", best.score_ilm},
                       {"length", best.tokens.size()},
                       {"total", score_hypothesis(best, dc)}};
    }
    const EditOps ops = edit_distance(hyp, u.reference);
    line["hypothesis"] = model.vocab.decode(hyp);
    line["reference"] = model.vocab.decode(u.reference);
    line["edit_ops"] = {{"sub", ops.substitutions}, {"ins", ops.insertions}, {"del", ops.deletions}};
    lines << line.dump() << '\n';
    s.ops.substitutions += ops.substitutions;
    s.ops.insertions += ops.insertions;
    s.ops.deletions += ops.deletions;
    s.ref_tokens += u.reference.size();
    ++s.utterances;
  }
  return s;
}

json SummaryJson(const DecodeSummary& s) {
  return {{"utterances", s.utterances},
          {"ref_tokens", s.ref_tokens},
          {"substitutions", s.ops.substitutions},
          {"insertions", s.ops.insertions},
          {"deletions", s.ops.deletions},
          {"error_rate", s.error_rate()}};
}

int Decode(const Common& c, const std::string& model_path, const std::string& data_dir,
           const std::string& split, const std::string& elm_path, bool greedy,
           const std::string& cmd, std::ostream& out) {
  const RunConfig cfg = Resolve(c);
  const RnntModel model = unpack_rnnt(read_checkpoint(model_path));
  const auto elm = LoadElm(elm_path);
  const Dataset d = read_dataset(data_dir);
  if (!(d.vocab == model.vocab)) throw UsageError("model vocabulary does not match the dataset");
  Stamp(c.out, cfg, cmd);
  std::ofstream lines(fs::path(c.out) / "decode.jsonl");
  const DecodeSummary s =
      DecodeSplit(model, elm ? &*elm : nullptr, cfg.decode, Split(d, split), greedy, lines);
  std::ofstream(fs::path(c.out) / "summary.json") << SummaryJson(s).dump(2) << '\n';
  out << split << ": " << s.utterances << " utterances, error rate " << s.error_rate() << '\n';
  return kExitOk;
}

int Eval(const Common& c, const std::string& decoded, const std::string& model_path,
         const std::string& data_dir, const std::string& split, const std::string& cmd,
         std::ostream& out) {
  const RunConfig cfg = Resolve(c);
  DecodeSummary s;
  if (!decoded.empty()) {
    std::ifstream is(decoded);
    if (!is) throw UsageError("cannot read " + decoded);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      auto split_tokens = [](const std::string& text) {
        std::vector<std::string> toks;
        std::istringstream ss(text);
        for (std::string t; ss >> t;) toks.push_back(t);
        return toks;
      };
      // Score on token strings; no vocabulary needed.
      const auto hyp = split_tokens(j.at("hypothesis").get<std::string>());
      const auto ref = split_tokens(j.at("reference").get<std::string>());
      std::map<std::string, int> ids;
      auto encode = [&](const std::vector<std::string>& v) {
        std::vector<int> out_ids;
        for (const auto& t : v) out_ids.push_back(ids.emplace(t, static_cast<int>(ids.size())).first->second);
        return out_ids;
      };
      const EditOps ops = edit_distance(encode(hyp), encode(ref));
      s.ops.substitutions += ops.substitutions;
      s.ops.insertions += ops.insertions;
      s.ops.deletions += ops.deletions;
      s.ref_tokens += ref.size();
      ++s.utterances;
    }
  } else {
    if (model_path.empty() || data_dir.empty()) {
      throw UsageError("eval needs --decoded FILE, or --model and --data");
    }
    const RnntModel model = unpack_rnnt(read_checkpoint(model_path));
    const Dataset d = read_dataset(data_dir);
    std::ostringstream sink;
    s = DecodeSplit(model, nullptr, cfg.decode, Split(d, split), true, sink);
  }
  if (s.ref_tokens == 0) throw ContractError("eval: reference corpus is empty");
  Stamp(c.out, cfg, cmd);
  std::ofstream(fs::path(c.out) / "eval.json") << SummaryJson(s).dump(2) << '\n';
  out << "error rate " << s.error_rate() << " (" << s.ops.total() << " / " << s.ref_tokens
      << ")\n";
  return kExitOk;
}

int LatticeInspect(const Common& c, const std::string& model_path, const std::string& data_dir,
                   const std::string& split, const std::string& utt_id, const std::string& cmd,
                   std::ostream& out) {
  const RunConfig cfg = Resolve(c);
  const RnntModel model = unpack_rnnt(read_checkpoint(model_path));
  const Dataset d = read_dataset(data_dir);
  const auto& utts = Split(d, split);
  const Utterance* u = nullptr;
  for (const Utterance& x : utts) {
    if (x.id == utt_id || utt_id.empty()) {
      u = &x;
      break;
    }
  }
  if (u == nullptr) throw UsageError("utterance '" + utt_id + "' not in split " + split);
  const int blank = model.vocab.blank_id();
  const JointTensor j = joint(encode(u->features, model.encoder),
                              predict_states(u->reference, model.prediction), model.joint, 1.0);
  const LatticeVars v = rnnt_forward_backward(j, u->reference, blank);
  const Array gamma = emission_occupancy(v, j, u->reference);
  const AlignmentIndices occ = extract_time_indices(gamma);
  const AlignmentIndices vit = viterbi_time_indices(j, u->reference, blank);
  json report = {{"utt_id", u->id},
                 {"reference", model.vocab.decode(u->reference)},
                 {"frames", j.frames()},
                 {"tokens", u->reference.size()},
                 {"log_likelihood", v.log_likelihood},
                 {"log_alpha", ArrayJson(v.log_alpha)},
                 {"log_beta", ArrayJson(v.log_beta)},
                 {"gamma", ArrayJson(gamma)},
                 {"t_u", occ.t_u},
                 {"t_u_viterbi", vit.t_u}};
  Stamp(c.out, cfg, cmd);
  std::ofstream(fs::path(c.out) / "lattice.json") << report.dump(1) << '\n';
  out << u->id << ": log p = " << v.log_likelihood << ", t_u =";
  for (std::size_t t : occ.t_u) out << ' ' << t;
  out << '\n';
  return kExitOk;
}

int Sweep(const Common& c, const std::string& data_dir, const std::string& levels,
          const std::string& source, const std::string& elm_path, const std::string& cmd,
          std::ostream& out) {
  const RunConfig base = Resolve(c);
  const Dataset d = read_dataset(data_dir);
  const auto elm = LoadElm(elm_path);
  const SamplingSource src = parse_source(source);
  if (src == SamplingSource::kElm && !elm) throw UsageError("--source elm needs --elm <checkpoint>");
  std::vector<std::pair<SsLevel, double>> grid{{SsLevel::kOff, 0.0}};
  if (levels == "token" || levels == "both") {
    if (src == SamplingSource::kRnnt) throw UsageError("token-level sampling cannot use the rnnt source");
    for (double l : {0.05, 0.15, 0.25}) grid.emplace_back(SsLevel::kToken, l);
  }
  if (levels == "utterance" || levels == "both") {
    for (double l : {0.15, 0.25, 0.5}) grid.emplace_back(SsLevel::kUtterance, l);
  }
  if (grid.size() == 1 && levels != "none") throw UsageError("--level must be token, utterance or both");
  Stamp(c.out, base, cmd);
  json table = json::array();
  out << std::left << std::setw(11) << "level" << std::setw(7) << "source" << std::setw(8)
      << "lambda" << "dev_error\n";
  for (const auto& [level, lambda] : grid) {
    RunConfig cfg = base;
    cfg.train.policy.level = level;
    cfg.train.policy.source = src;
    cfg.train.policy.lambda = lambda;
    cfg.validate();
    std::ostringstream name;
    name << level_name(level);
    if (level != SsLevel::kOff) name << '-' << source_name(src) << '-' << lambda;
    TrainOptions o;
    o.out_dir = fs::path(c.out) / name.str();
    o.dev_decode = cfg.decode;
    Stamp(*o.out_dir, cfg, cmd);
    const TrainResult r = train(d, cfg.model, cfg.train, elm ? &*elm : nullptr, o);
    table.push_back({{"level", level_name(level)},
                     {"source", level == SsLevel::kOff ? "-" : source_name(src)},
                     {"lambda", lambda},
                     {"dev_error", r.state.best_dev},
                     {"run", name.str()}});
    out << std::left << std::setw(11) << level_name(level) << std::setw(7)
        << (level == SsLevel::kOff ? "-" : source_name(src)) << std::setw(8) << lambda
        << r.state.best_dev << '\n';
  }
  std::ofstream(fs::path(c.out) / "sweep.json") << table.dump(2) << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transducer training with scheduled sampling", "tss"};
  app.set_version_flag("--version", std::string("tss ") + kVersion);
  app.require_subcommand(1);
  std::string kernels;
  app.add_option("--kernels", kernels, "Force a kernel set: scalar or avx2");

  Common c;
  std::string spec = "default", data, model, elm, split = "dev", utt, decoded;
  std::string level = "both", source = "ilm";
  bool resume = false, greedy = false;

  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  AddCommon(gen, c);
  gen->add_option("--spec", spec, "Corpus preset: default or tiny");

  auto* pre = app.add_subcommand("pretrain-elm", "Train the external LM on transcripts");
  AddCommon(pre, c);
  pre->add_option("-d,--data", data, "Dataset directory")->required();

  auto* tr = app.add_subcommand("train", "Train a transducer");
  AddCommon(tr, c);
  tr->add_option("-d,--data", data, "Dataset directory")->required();
  tr->add_option("--elm", elm, "External LM checkpoint (ss.source=elm)");
  tr->add_flag("--resume", resume, "Continue from <out>/last.ckpt");

  auto* dec = app.add_subcommand("decode", "Decode a split");
  AddCommon(dec, c);
  dec->add_option("-m,--model", model, "Transducer checkpoint")->required();
  dec->add_option("-d,--data", data, "Dataset directory")->required();
  dec->add_option("--split", split, "train, dev or test");
  dec->add_option("--elm", elm, "External LM for shallow fusion");
  dec->add_flag("--greedy", greedy, "Greedy search instead of beam search");

  auto* ev = app.add_subcommand("eval", "Score decoded output or a model");
  AddCommon(ev, c);
  ev->add_option("--decoded", decoded, "decode.jsonl to score");
  ev->add_option("-m,--model", model, "Transducer checkpoint (greedy decoding)");
  ev->add_option("-d,--data", data, "Dataset directory");
  ev->add_option("--split", split, "train, dev or test");

  auto* lat = app.add_subcommand("lattice-inspect", "Dump lattice variables for one utterance");
  AddCommon(lat, c);
  lat->add_option("-m,--model", model, "Transducer checkpoint")->required();
  lat->add_option("-d,--data", data, "Dataset directory")->required();
  lat->add_option("--split", split, "train, dev or test");
  lat->add_option("--utt", utt, "Utterance id (default: first in split)");

  auto* sw = app.add_subcommand("sweep", "Train over the lambda grid and tabulate dev error");
  AddCommon(sw, c);
  sw->add_option("-d,--data", data, "Dataset directory")->required();
  sw->add_option("--level", level, "token, utterance or both");
  sw->add_option("--source", source, "elm, ilm or rnnt");
  sw->add_option("--elm", elm, "External LM checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion& e) {
    out << e.what() << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  const std::string cmd = CommandLine(argc, argv);
  CLI::App* active = app.get_subcommands().front();
  try {
    if (!kernels.empty()) {
      if (kernels == "scalar") {
        kernels::set_active_isa(kernels::Isa::kScalar);
      } else if (kernels == "avx2") {
        if (!kernels::isa_supported(kernels::Isa::kAvx2)) throw UsageError("this CPU lacks AVX2/FMA");
        kernels::set_active_isa(kernels::Isa::kAvx2);
      } else {
        throw UsageError("--kernels must be scalar or avx2");
      }
    }
    if (active == gen) return Generate(c, spec, cmd, out);
    if (active == pre) return PretrainElm(c, data, cmd, out);
    if (active == tr) return Train(c, data, elm, resume, cmd, out);
    if (active == dec) return Decode(c, model, data, split, elm, greedy, cmd, out);
    if (active == ev) return Eval(c, decoded, model, data, split, cmd, out);
    if (active == lat) return LatticeInspect(c, model, data, split, utt, cmd, out);
    if (active == sw) return Sweep(c, data, level, source, elm, cmd, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << active->help();
    return kExitUsage;
  } catch (const ParameterError& e) {
    // Covers config errors: unknown keys, bad values, out-of-range settings.
    err << "error: " << e.what() << "\n\n" << active->help();
    return kExitUsage;
  } catch (const NonFiniteLoss& e) {
    err << "error: " << e.what() << " (utterance " << e.utterance_id() << ")\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace tss
