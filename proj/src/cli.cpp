#include "raglab/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "raglab/diagnostics.hpp"
#include "raglab/io.hpp"

namespace raglab {

namespace {

namespace fs = std::filesystem;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

ModelBundle bundle_for(const RunConfig& cfg, const KnowledgeBase& kb) {
  if (!cfg.init_checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(cfg.init_checkpoint);
    require(ck.bundle.vocab() == kb.vocab_size, "checkpoint vocabulary does not match the knowledge base");
    return ck.bundle;
  }
  return ModelBundle::init(kb.vocab_size, cfg.embed_dim, cfg.train.seed);
}

}  // namespace

int cmd_gen_data(const RunConfig& cfg) {
  require(!cfg.out_dir.empty(), "gen-data: --out-dir is required");
  ensure_dir(cfg.out_dir);
  const SyntheticTask task = generate_synthetic_task(
      cfg.num_passages, cfg.vocab_size, {cfg.n_train, cfg.n_dev, cfg.n_test}, cfg.train.seed);
  save_kb(task.kb, cfg.out_dir + "/kb.jsonl");
  save_dataset(task.train, cfg.out_dir + "/train.jsonl");
  save_dataset(task.dev, cfg.out_dir + "/dev.jsonl");
  save_dataset(task.test, cfg.out_dir + "/test.jsonl");
  std::cout << "wrote kb (" << task.kb.size() << " passages) and splits "
            << task.train.examples.size() << "/" << task.dev.examples.size() << "/"
            << task.test.examples.size() << " to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  require(!cfg.kb_path.empty(), "train: --kb is required");
  require(!cfg.train_path.empty(), "train: --train-data is required");
  require(!cfg.checkpoint_dir.empty(), "train: --checkpoint-dir is required");
  cfg.train.validate();

  const KnowledgeBase kb = load_kb(cfg.kb_path);
  const Dataset data = load_dataset(cfg.train_path, kb);
  const ModelBundle init = bundle_for(cfg, kb);

  ensure_dir(cfg.checkpoint_dir);
  std::ostringstream trace;
  std::ostringstream grad_csv;
  GradientRecorder recorder(cfg.train.grad_report_every, &grad_csv);
  TrainHooks hooks;
  hooks.on_grad_report = [&](const GradientReport& r) { recorder(r); };
  TrainResult result = train(init, data, kb, cfg.train, &trace, hooks);

  write_file_atomic(cfg.checkpoint_dir + "/trace.jsonl", trace.str());
  write_file_atomic(cfg.checkpoint_dir + "/gradient_norms.csv", grad_csv.str());
  save_checkpoint(cfg.checkpoint_dir, result.bundle, cfg.train, result.steps_run, result.rng_state);
  std::cout << "trained " << estimator_name(cfg.train.estimator) << " for " << result.steps_run
            << " steps; checkpoint at " << cfg.checkpoint_dir << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  require(!cfg.kb_path.empty(), "eval: --kb is required");
  require(!cfg.dataset_path.empty(), "eval: --data is required");
  require(!cfg.init_checkpoint.empty(), "eval: --checkpoint is required");
  require(!cfg.out_dir.empty(), "eval: --out-dir is required");

  const KnowledgeBase kb = load_kb(cfg.kb_path);
  const Dataset data = load_dataset(cfg.dataset_path, kb);
  const ModelBundle b = bundle_for(cfg, kb);
  const PassageIndex index = build_index(kb, b.passage, b.passage_version);

  const RetrievalMetrics prior = retrieval_metrics(b, data, index, RetrieverKind::prior);
  const RetrievalMetrics posterior = retrieval_metrics(b, data, index, RetrieverKind::posterior);
  const GenerationMetrics gen = generation_metrics(b, data, index, kb, cfg.eval_k,
                                                   cfg.train.beam_width, cfg.decode_mode,
                                                   cfg.max_decode_len);

  const auto records = per_example_eval(b, data, index, kb, cfg.eval_k, cfg.train.beam_width,
                                        cfg.decode_mode, cfg.max_decode_len);

  ensure_dir(cfg.out_dir);
  write_file_atomic(cfg.out_dir + "/records.jsonl", eval_records_jsonl(records));
  write_file_atomic(cfg.out_dir + "/metrics.csv", metrics_csv(prior, posterior, gen));
  write_file_atomic(cfg.out_dir + "/metrics.txt", metrics_table(prior, posterior, gen));
  std::cout << metrics_table(prior, posterior, gen);
  return 0;
}

int cmd_diagnose(const RunConfig& cfg) {
  require(!cfg.kb_path.empty(), "diagnose: --kb is required");
  require(!cfg.dataset_path.empty(), "diagnose: --data is required");
  require(!cfg.init_checkpoint.empty(), "diagnose: --checkpoint is required");
  require(!cfg.out_dir.empty(), "diagnose: --out-dir is required");

  const KnowledgeBase kb = load_kb(cfg.kb_path);
  const Dataset data = load_dataset(cfg.dataset_path, kb);
  require(cfg.example_index >= 0 && cfg.example_index < static_cast<int>(data.examples.size()),
          "diagnose: --example out of range");
  const ModelBundle b = bundle_for(cfg, kb);
  const PassageIndex index = build_index(kb, b.passage, b.passage_version);

  std::string csv = gradient_report_csv_header();
  for (Estimator est : cfg.estimators) {
    const GradientReport r = estimate_bias_variance(b, data.examples[cfg.example_index], kb, index,
                                                    cfg.train, est, cfg.replicates, cfg.train.seed);
    csv += gradient_report_csv_rows(r);
  }
  ensure_dir(cfg.out_dir);
  write_file_atomic(cfg.out_dir + "/gradient_report.csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_posttrain_concat(const RunConfig& cfg) {
  require(!cfg.kb_path.empty(), "posttrain-concat: --kb is required");
  require(!cfg.train_path.empty(), "posttrain-concat: --train-data is required");
  require(!cfg.init_checkpoint.empty(), "posttrain-concat: --checkpoint is required");
  require(!cfg.checkpoint_dir.empty(), "posttrain-concat: --checkpoint-dir is required");

  const KnowledgeBase kb = load_kb(cfg.kb_path);
  const Dataset data = load_dataset(cfg.train_path, kb);
  const ModelBundle init = bundle_for(cfg, kb);

  ensure_dir(cfg.checkpoint_dir);
  std::ostringstream trace;
  TrainResult result = concat_posttrain(init, data, kb, cfg.train, &trace);
  write_file_atomic(cfg.checkpoint_dir + "/trace.jsonl", trace.str());
  save_checkpoint(cfg.checkpoint_dir, result.bundle, cfg.train, result.steps_run, result.rng_state);
  std::cout << "post-trained generator for " << result.steps_run << " steps; checkpoint at "
            << cfg.checkpoint_dir << "\n";
  return 0;
}

int cmd_timing(const RunConfig& cfg) {
  require(!cfg.kb_path.empty(), "timing: --kb is required");
  require(!cfg.train_path.empty(), "timing: --train-data is required");
  require(!cfg.out_dir.empty(), "timing: --out-dir is required");

  const KnowledgeBase kb = load_kb(cfg.kb_path);
  const Dataset data = load_dataset(cfg.train_path, kb);
  const ModelBundle b = bundle_for(cfg, kb);

  const auto rows = timing_report(b, data, kb, cfg.train, cfg.estimators);
  ensure_dir(cfg.out_dir);
  write_file_atomic(cfg.out_dir + "/timing.txt", timing_table(rows));
  std::cout << timing_table(rows);
  return 0;
}

}  // namespace raglab
