// mop: command line entry points.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "mop/pipeline.hpp"
#include "mop/synth.hpp"

namespace {

using namespace mop;

std::vector<std::uint64_t> parse_users(const std::string& arg) {
  std::string text = arg;
  if (!arg.empty() && arg[0] == '@') {
    std::ifstream in(arg.substr(1));
    if (!in) throw LookupError("cannot read user list " + arg.substr(1));
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  for (char& c : text) {
    if (c == '\n' || c == '\t' || c == ' ') c = ',';
  }
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    std::size_t pos = 0;
    out.push_back(std::stoull(part, &pos));
    if (pos != part.size()) throw ValidationError("bad user id '" + part + "'");
  }
  return out;
}

std::string default_config(const SynthSpec& s) {
  ConfigFile f;
  std::string domains, overlaps;
  for (std::size_t k = 0; k < s.domains; ++k) {
    domains += (k ? ", " : "") + ("domain" + std::to_string(k) + ".tsv");
    if (k > 0) overlaps += (k > 1 ? ", " : "") + ("0:" + std::to_string(k) + ":overlap_0_" + std::to_string(k) + ".tsv");
  }
  f.set("data", "domains", domains);
  if (!overlaps.empty()) f.set("data", "overlap", overlaps);
  f.set("data", "out", "run");
  f.set("model", "motif", "walk");
  f.set("model", "prompt", "matrix");
  f.set("train", "optimizer", "adam");
  f.set("train", "lr", "0.01");
  f.set("train", "tune_lr", "0.01");
  f.set("train", "pretrain_epochs", "40");
  f.set("run", "seed", std::to_string(s.seed));
  return f.serialize();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Motif-based prompt learning for cross-domain recommendation"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  int threads = 0;
  app.add_option("--threads", threads, "Worker thread cap (1 = deterministic reference)");

  auto need_config = [&](CLI::App* sub) { sub->add_option("--config", config_path, "Config file")->required(); };

  auto* ingest = app.add_subcommand("ingest", "Split raw interactions and write the workspace");
  need_config(ingest);

  SynthSpec spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a planted-cluster multi-domain dataset");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", spec.seed, "Generator seed")->required();
  synth->add_option("--domains", spec.domains, "Number of domains")->capture_default_str();
  synth->add_option("--users", spec.users, "Users per domain")->capture_default_str();
  synth->add_option("--items", spec.items, "Items per domain")->capture_default_str();
  synth->add_option("--clusters", spec.clusters, "Latent clusters")->capture_default_str();
  synth->add_option("--overlap", spec.overlap, "Fraction of users shared by all domains")->capture_default_str();
  synth->add_option("--noise", spec.noise, "Probability of an out-of-cluster interaction")->capture_default_str();
  synth->add_option("--min-degree", spec.min_degree)->capture_default_str();
  synth->add_option("--max-degree", spec.max_degree)->capture_default_str();
  synth->add_option("--popularity", spec.popularity, "Zipf exponent inside a cluster")->capture_default_str();

  auto* sample = app.add_subcommand("sample-motifs", "Sample motif pools and write them with their incidence");
  need_config(sample);

  auto* pre = app.add_subcommand("pretrain", "Pre-train the encoder");
  need_config(pre);

  int domain = 0;
  std::string task_name = "intra";
  auto* tune = app.add_subcommand("prompt-tune", "Tune one domain's prompts on a frozen encoder");
  need_config(tune);
  tune->add_option("--domain", domain)->required();
  tune->add_option("--task", task_name, "intra or inter")->capture_default_str();

  std::string ckpt, protocol_name;
  std::uint64_t eval_seed_arg = 0;
  bool have_seed = false;
  auto* eval = app.add_subcommand("evaluate", "Leave-one-out HR@10 / NDCG@10 on test users");
  need_config(eval);
  eval->add_option("--ckpt", ckpt, "Checkpoint (default: tuned checkpoint of the domain and task)");
  eval->add_option("--domain", domain)->required();
  eval->add_option("--task", task_name)->capture_default_str();
  eval->add_option("--protocol", protocol_name, "full, sampled or sampled:N (default from config)");
  eval->add_option("--seed", eval_seed_arg, "Negative-sampling seed")->each([&](const std::string&) { have_seed = true; });

  std::string users_arg;
  std::size_t top_k = 10;
  std::string task_override;
  auto* rec = app.add_subcommand("recommend", "Top-K items per user from a tuned checkpoint");
  need_config(rec);
  rec->add_option("--ckpt", ckpt)->required();
  rec->add_option("--domain", domain)->required();
  rec->add_option("--users", users_arg, "Comma separated ids or @file")->required();
  rec->add_option("--k", top_k)->capture_default_str();
  rec->add_option("--task", task_override, "Override the checkpoint's task");

  auto* pipe = app.add_subcommand("pipeline", "ingest, sample, pretrain, tune every domain and task, evaluate");
  need_config(pipe);

  CLI11_PARSE(app, argc, argv);

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (synth->parsed()) {
      auto data = generate_synthetic(spec);
      write_synthetic(synth_out, data);
      write_text(std::filesystem::path(synth_out) / "config.ini", default_config(spec));
      std::cout << "wrote " << spec.domains << " domains to " << synth_out << "\n";
      return 0;
    }
    auto cfg = PipelineConfig::load(config_path);
    if (threads > 0) cfg.train.threads = static_cast<unsigned>(threads);

    if (ingest->parsed()) {
      run_ingest(cfg, std::cout);
    } else if (sample->parsed()) {
      run_sample_motifs(cfg, std::cout);
    } else if (pre->parsed()) {
      run_pretrain(cfg, std::cout);
    } else if (tune->parsed()) {
      run_tune(cfg, domain, parse_task(task_name), std::cout);
    } else if (eval->parsed()) {
      const Task task = parse_task(task_name);
      const auto protocol = protocol_name.empty() ? cfg.eval.protocol : parse_protocol(protocol_name);
      const auto path = ckpt.empty() ? tuned_checkpoint(cfg, domain, task) : std::filesystem::path(ckpt);
      const auto seed = have_seed ? eval_seed_arg : eval_seed(cfg.train.seed, domain, task);
      const auto r = run_evaluate(cfg, path, domain, task, protocol, seed);
      std::cout << report_line(to_string(task), domain, r) << "\n";
      if (r.skipped > 0) std::cerr << "[evaluate] " << r.skipped << " users skipped\n";
      if (r.full_fallbacks > 0) {
        std::cerr << "[evaluate] warning: " << r.full_fallbacks << " users ranked against the full catalog\n";
      }
    } else if (rec->parsed()) {
      std::map<std::string, std::string> meta;
      ad::load_params(ckpt, &meta);
      if (meta["stage"] != "tuned") std::cerr << "[recommend] warning: checkpoint stage is " << meta["stage"] << "\n";
      const Task task = parse_task(!task_override.empty() ? task_override
                                   : meta.contains("task") ? meta["task"]
                                                            : std::string("intra"));
      const auto ws = load_workspace(cfg);
      const auto model = load_model(cfg, ws, ckpt);
      const auto users = parse_users(users_arg);
      for (const auto& r : recommend(model, model.domain_index(domain), task, users, top_k)) {
        std::cout << recommendation_line(r) << "\n";
      }
    } else if (pipe->parsed()) {
      run_pipeline(cfg, std::cout);
    }
  } catch (const PipelineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: [" << stage << "] " << e.what() << "\n";
    return 1;
  }
  return 0;
}
