// trace: command-line driver for the evaluation pipeline.
//
// Exit codes: 0 success, 1 error (including config validation), 2 partial
// failure (the stage finished and its report lists what failed).

#include <csignal>
#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "trace/annotation_server.hpp"
#include "trace/pipeline.hpp"

namespace {

using trace::pipeline::StageResult;
using trace::pipeline::Workspace;

struct Options {
  std::string config_file;
  std::string format = "text";
  std::map<std::string, std::string> overrides;  // config key -> value
};

/// Registers --flag as an override of config key `key`.
void bind(CLI::App* sub, Options& o, const std::string& flag, const std::string& key, const std::string& help) {
  sub->add_option_function<std::string>(flag, [&o, key](const std::string& v) { o.overrides[key] = v; }, help);
}

void common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config_file, "Config file (TOML-style key = value)");
  sub->add_option("--format", o.format, "Report format")->check(CLI::IsMember({"text", "json"}));
  bind(sub, o, "--work,--runs", "paths.work", "Work directory holding the store and reports");
  bind(sub, o, "--dataset", "dataset", "speakbench | s2s_arena | custom");
  bind(sub, o, "--policy", "policy", "speakbench_tree | s2s_arena_cap | majority_vote");
  bind(sub, o, "--cap", "cap", "strict | lenient");
  bind(sub, o, "--arity", "arity", "2 | 3 | 4");
  bind(sub, o, "--seed", "seed", "Bootstrap seed");
  bind(sub, o, "--replicates", "replicates", "Bootstrap replicates (>= 1000)");
  bind(sub, o, "--ablate", "ablate", "Masked blueprint groups: emotion,accent,quality,properties");
  bind(sub, o, "--modes", "judge.modes", "Judge modes: trace,transcript,audio");
  bind(sub, o, "--prompts", "paths.prompts", "Prompt template directory");
  bind(sub, o, "--workers", "workers", "Worker threads");
}

trace::pipeline::RunConfig build_config(const Options& o) {
  trace::config::KeyValues kv;
  if (!o.config_file.empty()) kv = trace::pipeline::load_config_file(o.config_file);
  for (const auto& [k, v] : o.overrides) kv.set(k, v);
  return trace::pipeline::RunConfig::from(kv);
}

trace::config::KeyValues raw_config(const Options& o) {
  trace::config::KeyValues kv;
  if (!o.config_file.empty()) kv = trace::pipeline::load_config_file(o.config_file);
  for (const auto& [k, v] : o.overrides) kv.set(k, v);
  return kv;
}

int emit(const StageResult& r, const Options& o) {
  if (o.format == "json")
    std::cout << r.report.dump(2) << "\n";
  else
    std::cout << r.text;
  return r.partial ? 2 : 0;
}

trace::server::AnnotationServer* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TRACE speech-to-speech evaluation pipeline"};
  app.require_subcommand(1);
  Options o;

  auto* ingest = app.add_subcommand("ingest", "Register a dataset manifest into the store");
  common(ingest, o);
  bind(ingest, o, "--manifest", "ingest.manifest", "Dataset manifest JSONL");
  bind(ingest, o, "--audio-dir", "ingest.audio_dir", "Directory the manifest's audio paths are relative to");
  bind(ingest, o, "--exclusions", "ingest.exclusions", "File of example ids to exclude (one per line)");

  auto* extract = app.add_subcommand("extract", "Measure pitch, loudness and speech activity");
  common(extract, o);
  std::string audio_dir, out_dir;
  extract->add_option("--audio", audio_dir, "Directory of WAV/FLAC files (otherwise: stored examples)");
  extract->add_option("--out", out_dir, "Output directory for --audio mode");

  auto* fetch = app.add_subcommand("fetch-features", "Fetch ASR, emotion, accent and MOS features");
  common(fetch, o);
  bind(fetch, o, "--manifest", "features.manifest", "Precomputed JSONL of {clip_id, feature, payload}");
  std::string endpoint;
  fetch->add_option("--endpoint", endpoint, "http:// extractor service serving every feature");

  auto* bp = app.add_subcommand("blueprint", "Assemble blueprints for every response");
  common(bp, o);

  auto* judge_cmd = app.add_subcommand("judge", "Render prompts and query the judge backend");
  common(judge_cmd, o);
  bind(judge_cmd, o, "--backend", "judge.backend", "replay | openai");
  bind(judge_cmd, o, "--fixture", "judge.fixture", "Replay fixture JSONL");
  bind(judge_cmd, o, "--base-url", "judge.base_url", "Chat-completions base URL");
  bind(judge_cmd, o, "--model", "judge.model", "Model name");
  bool swap_ab = false;
  judge_cmd->add_flag("--swap-ab", swap_ab, "Also judge with A and B swapped");

  auto* fuse = app.add_subcommand("fuse", "Fuse per-dimension decisions into overall labels");
  auto* eval = app.add_subcommand("eval", "Accuracy table, McNemar tests and confusion matrices");
  auto* probe = app.add_subcommand("probe", "Sensitivity probes P1, P2, P3");
  auto* cost = app.add_subcommand("cost", "Token and dollar accounting");
  auto* agree = app.add_subcommand("agree", "Agreement and Cohen's kappa between two label sets");
  for (auto* s : {fuse, eval, probe, cost, agree}) {
    common(s, o);
    bind(s, o, "--backend", "judge.backend", "replay | openai");
    bind(s, o, "--fixture", "judge.fixture", "Replay fixture JSONL");
    bind(s, o, "--base-url", "judge.base_url", "Chat-completions base URL");
    bind(s, o, "--model", "judge.model", "Model name");
  }
  bind(eval, o, "--truth", "paths.truth", "Truth JSONL (default: HCoT annotations in the store)");
  bind(probe, o, "--truth", "paths.truth", "Truth JSONL (default: HCoT annotations in the store)");
  std::string which = "p1";
  probe->add_option("--which", which, "p1 | p2 | p3")->check(CLI::IsMember({"p1", "p2", "p3", "P1", "P2", "P3"}));
  bind(cost, o, "--prices", "paths.prices", "Price sheet");
  std::string label_a, label_b, target = "overall";
  agree->add_option("--a", label_a, "orig | blind | hcot | hcot_resample | system:<name> | file.jsonl")->required();
  agree->add_option("--b", label_b, "Second label source")->required();
  agree->add_option("--target", target, "overall | content | voice_quality | paralinguistics")
      ->check(CLI::IsMember({"overall", "content", "voice_quality", "paralinguistics"}));

  auto* serve = app.add_subcommand("serve", "Run the annotation server");
  common(serve, o);
  std::string host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port");

  CLI11_PARSE(app, argc, argv);

  try {
    if (endpoint.size()) o.overrides["features.manifest"] = endpoint;
    if (swap_ab) o.overrides["judge.swap_ab"] = "true";
    auto cfg = build_config(o);
    Workspace ws(cfg);

    if (ingest->parsed()) return emit(trace::pipeline::run_ingest(ws), o);
    if (extract->parsed()) {
      if (!audio_dir.empty()) {
        if (out_dir.empty()) throw trace::pipeline::invalid("out", "required with --audio");
        return emit(trace::pipeline::run_extract_dir(ws, audio_dir, out_dir), o);
      }
      return emit(trace::pipeline::run_extract(ws), o);
    }
    if (fetch->parsed()) return emit(trace::pipeline::run_fetch_features(ws), o);
    if (bp->parsed()) return emit(trace::pipeline::run_blueprint(ws), o);
    if (judge_cmd->parsed()) {
      auto backend = trace::pipeline::make_backend(cfg);
      return emit(trace::pipeline::run_judging(ws, *backend), o);
    }
    if (serve->parsed()) {
      auto scfg = trace::server::ServerConfig::from_config(raw_config(o));
      scfg.agreement_seed = cfg.seed;
      trace::server::AnnotationServer server(ws.store(), scfg);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving " << cfg.work.string() << " on http://" << host << ":" << port << "\n";
      if (!server.listen(host, port)) {
        std::cerr << "error: cannot listen on " << host << ":" << port << "\n";
        return 1;
      }
      return 0;
    }

    const auto backend_id = trace::pipeline::make_backend(cfg)->id();
    if (fuse->parsed()) return emit(trace::pipeline::run_fuse(ws, backend_id), o);
    if (eval->parsed()) return emit(trace::pipeline::run_eval(ws, backend_id), o);
    if (probe->parsed()) {
      auto p = trace::probes::try_parse_probe(which);
      return emit(trace::pipeline::run_probe_stage(ws, backend_id, *p), o);
    }
    if (cost->parsed()) return emit(trace::pipeline::run_cost(ws, backend_id), o);
    if (agree->parsed()) {
      auto t = trace::protocol::try_parse_target(target);
      return emit(trace::pipeline::run_agree(ws, label_a, label_b, *t, backend_id), o);
    }
  } catch (const trace::CodedError& e) {
    std::cerr << "error: " << e.code() << ": " << e.detail() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
