// Copyright (c) 2026 The layerlens Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end.
//
//   layerlens cka       --acts-a DIR --acts-b DIR [--batch-size 4] --out DIR
//   layerlens selfsim   --acts DIR [--batch-size 4] --out DIR
//   layerlens probe     --acts DIR --labels FILE [--projections on|off] --out DIR
//   layerlens toygen    [--kind encoder|planted] [--model ...] --out DIR
//   layerlens dino-demo [--no-centering] [--no-sharpening] --out DIR
//
// Every subcommand takes --seed (default 0). Diagnostics go to the error
// stream prefixed with "error: "; the exit code is nonzero exactly when one
// was printed.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "layerlens/layerlens.hpp"

namespace layerlens::cli {

namespace fs = std::filesystem;

struct RunConfig {
  std::string subcommand;
  std::uint64_t seed = 0;
  fs::path out_dir;

  // cka / selfsim
  fs::path acts_a;
  fs::path acts_b;
  CkaConfig cka;
  std::optional<std::uint64_t> shuffle_seed;
  bool exclude_segment_level = false;
  int cell_px = 16;

  // probe
  fs::path labels;
  std::string projections = "on";
  ProbeConfig probe;

  // toygen
  std::string kind = "encoder";
  std::string model = "random";
  int layers = 6;
  Eigen::Index width = 16;
  Eigen::Index input_dim = 16;
  int utterances = 40;
  int frames = 16;
  int classes = 4;
  double separation = 2.0;
  std::string activation = "tanh";
  std::optional<double> init_scale;  // default depends on the model
  int bottleneck_depth = -1;
  int bottleneck_rank = 2;
  std::string frame_hop = "1";
  int planted_layer = 0;
  std::vector<Eigen::Index> dims;
  double noise = 1.0;
  int train_steps = -1;

  // dino-demo
  bool no_centering = false;
  bool no_sharpening = false;
  DinoConfig dino;
};

namespace detail {

inline void WriteTextFile(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  Check(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  Check(out.good(), ErrorCode::kIo, "write failed on " + path.string());
}

inline void PrepareOut(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  Check(!ec && fs::is_directory(dir), ErrorCode::kIo, "cannot create directory " + dir.string());
}

inline void EmitSimilarity(const SimilarityMatrix& sm, const RunConfig& rc, std::ostream& out) {
  PrepareOut(rc.out_dir);
  std::ostringstream csv;
  WriteSimilarityCsv(csv, sm);
  WriteTextFile(rc.out_dir / "similarity.csv", csv.str());
  const auto img = RenderHeatmap(sm.values, rc.cell_px);
  WritePgmFile(rc.out_dir / "similarity.pgm", img);
  std::ostringstream meta;
  auto kv = SimilarityMeta(sm, img);
  kv.Add("seed", static_cast<std::int64_t>(rc.seed));
  kv.Write(meta);
  WriteTextFile(rc.out_dir / "meta.txt", meta.str());
  out << "wrote " << sm.values.rows() << "x" << sm.values.cols() << " similarity grid to "
      << rc.out_dir.string() << "\n";
}

inline CkaConfig EffectiveCka(const RunConfig& rc) {
  CkaConfig cfg = rc.cka;
  cfg.shuffle_seed = rc.shuffle_seed;
  cfg.include_segment_level = !rc.exclude_segment_level;
  return cfg;
}

inline int CmdCka(const RunConfig& rc, std::ostream& out) {
  const auto a = LoadActivationSet(rc.acts_a);
  const auto b = LoadActivationSet(rc.acts_b);
  EmitSimilarity(ComputeSimilarityMatrix(a, b, EffectiveCka(rc)), rc, out);
  return 0;
}

inline int CmdSelfsim(const RunConfig& rc, std::ostream& out) {
  const auto a = LoadActivationSet(rc.acts_a);
  EmitSimilarity(SelfSimilarity(a, EffectiveCka(rc)), rc, out);
  return 0;
}

// "utterance_id class" per line; blank lines and '#' comments are skipped.
inline std::vector<int> ReadLabels(const fs::path& path, const ActivationSet& set,
                                   int* num_classes) {
  std::ifstream in(path);
  Check(in.good(), ErrorCode::kMissingFile, path.string());
  std::map<std::string, int> by_id;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string id;
    long long cls = -1;
    Check(static_cast<bool>(ss >> id >> cls) && cls >= 0, ErrorCode::kParse,
          path.string() + ":" + std::to_string(line_no) + ": expected '<utterance_id> <class>'");
    Check(by_id.emplace(id, static_cast<int>(cls)).second, ErrorCode::kParse,
          path.string() + ":" + std::to_string(line_no) + ": duplicate utterance '" + id + "'");
  }
  Check(by_id.size() == set.num_sequences(), ErrorCode::kCorpusMismatch,
        path.string() + " has " + std::to_string(by_id.size()) + " labels for " +
            std::to_string(set.num_sequences()) + " utterances");
  std::vector<int> labels;
  int max_class = -1;
  for (const auto& id : set.utterance_ids) {
    auto it = by_id.find(id);
    Check(it != by_id.end(), ErrorCode::kCorpusMismatch,
          path.string() + " has no label for utterance '" + id + "'");
    labels.push_back(it->second);
    max_class = std::max(max_class, it->second);
  }
  *num_classes = max_class + 1;
  return labels;
}

inline int CmdProbe(const RunConfig& rc, std::ostream& out) {
  Check(rc.projections == "on" || rc.projections == "off", ErrorCode::kInvalidArgument,
        "--projections must be 'on' or 'off'");
  ProbeTask task;
  task.inputs = LoadActivationSet(rc.acts_a);
  task.labels = ReadLabels(rc.labels, task.inputs, &task.num_classes);
  ProbeConfig cfg = rc.probe;
  cfg.use_projections = rc.projections == "on";
  const auto result = TrainProbe(task, cfg, rc.seed);

  PrepareOut(rc.out_dir);
  const int best = ArgMax(result.contribution);
  {
    std::ostringstream report;
    KeyValueWriter kv;
    kv.Add("model", task.inputs.model_name)
        .Add("num_layers", static_cast<int>(task.inputs.num_layers()))
        .Add("num_utterances", static_cast<int>(task.inputs.num_sequences()))
        .Add("num_classes", task.num_classes)
        .Add("projections", rc.projections)
        .Add("out_dim", static_cast<std::int64_t>(result.params.combiner.out_dim))
        .Add("learning_rate", cfg.learning_rate)
        .Add("steps", cfg.steps)
        .Add("weight_decay", cfg.weight_decay)
        .Add("train_fraction", cfg.train_fraction)
        .Add("seed", static_cast<std::int64_t>(rc.seed))
        .Add("train_utterances", static_cast<int>(result.split.train.size()))
        .Add("held_out_utterances", static_cast<int>(result.split.held_out.size()))
        .Add("accuracy", result.accuracy)
        .Add("train_accuracy", result.train_accuracy)
        .Add("majority_baseline", result.majority_baseline)
        .Add("final_loss", result.loss_trace.back())
        .Add("layer_weights", result.weights)
        .Add("contribution", result.contribution)
        .Add("argmax_layer", best);
    kv.Write(report);
    WriteTextFile(rc.out_dir / "probe_report.txt", report.str());
  }
  {
    std::ostringstream csv;
    csv << "layer,weight,projection_norm,contribution\n";
    for (std::size_t l = 0; l < result.contribution.size(); ++l) {
      const double norm = result.params.combiner.has_projections()
                              ? result.params.combiner.projections[l].norm()
                              : 1.0;
      csv << l << "," << FormatDouble(result.weights[l]) << "," << FormatDouble(norm) << ","
          << FormatDouble(result.contribution[l]) << "\n";
    }
    WriteTextFile(rc.out_dir / "contrib.csv", csv.str());
  }
  {
    std::ostringstream csv;
    csv << "step,loss\n";
    for (std::size_t s = 0; s < result.loss_trace.size(); ++s)
      csv << s << "," << FormatDouble(result.loss_trace[s]) << "\n";
    WriteTextFile(rc.out_dir / "loss_trace.csv", csv.str());
  }
  WritePgmFile(rc.out_dir / "contrib.pgm", RenderBarStrip(result.contribution));
  out << "accuracy=" << FormatDouble(result.accuracy) << " argmax_layer=" << best << "\n";
  return 0;
}

inline void WriteLabels(const fs::path& path, const std::vector<std::string>& ids,
                        const std::vector<int>& labels) {
  std::ostringstream ss;
  for (std::size_t i = 0; i < ids.size(); ++i) ss << ids[i] << " " << labels[i] << "\n";
  WriteTextFile(path, ss.str());
}

inline int CmdToygen(const RunConfig& rc, std::ostream& out) {
  PrepareOut(rc.out_dir);
  KeyValueWriter kv;
  kv.Add("kind", rc.kind).Add("seed", static_cast<std::int64_t>(rc.seed));
  ActivationSet set;
  std::vector<int> labels;

  if (rc.kind == "planted") {
    ProbeDatasetConfig pc;
    pc.num_layers = rc.layers;
    pc.planted_layer = rc.planted_layer;
    pc.num_classes = rc.classes;
    pc.utterances = rc.utterances;
    pc.frames = rc.frames;
    pc.dims = rc.dims.empty() ? std::vector<Eigen::Index>{rc.width} : rc.dims;
    pc.separation = rc.separation;
    pc.noise = rc.noise;
    auto ds = GenProbeDataset(pc, rc.seed);
    set = std::move(ds.set);
    labels = std::move(ds.labels);
    kv.Add("layers", rc.layers).Add("planted_layer", rc.planted_layer);
  } else if (rc.kind == "encoder") {
    CorpusConfig cc;
    cc.num_classes = rc.classes;
    cc.utterances = rc.utterances;
    cc.frames = rc.frames;
    cc.dim = rc.input_dim;
    cc.class_separation = rc.separation;
    cc.frame_noise = rc.noise;
    const std::vector<Eigen::Index> dims =
        rc.dims.empty() ? std::vector<Eigen::Index>(static_cast<std::size_t>(rc.layers), rc.width)
                        : rc.dims;
    const auto act = ParseNonlinearity(rc.activation);
    // Every model kind sees the same corpus for a given seed, so exported sets
    // from different kinds can be compared with cka.
    ToyEncoder enc;
    Corpus corpus;
    if (rc.model == "random" || rc.model == "smooth" || rc.model == "bottleneck") {
      corpus = MakeLabeledCorpus(cc, rc.seed);
      EncoderConfig ec;
      ec.input_dim = rc.input_dim;
      ec.layer_dims = dims;
      ec.activation = act;
      if (rc.model == "smooth") {
        ec.init = InitStyle::kNearIdentity;
        ec.init_scale = kSmoothInitScale;
      }
      if (rc.init_scale) ec.init_scale = *rc.init_scale;
      if (rc.model == "bottleneck" || rc.bottleneck_depth >= 0) {
        ec.bottleneck = Bottleneck{rc.bottleneck_depth >= 0 ? rc.bottleneck_depth
                                                            : static_cast<int>(dims.size()) / 2,
                                   rc.bottleneck_rank};
        kv.Add("bottleneck_depth", ec.bottleneck->depth).Add("bottleneck_rank", ec.bottleneck->rank);
      }
      enc = MakeToyEncoder(ec, DeriveSeed(rc.seed, 11));
    } else if (rc.model == "supervised") {
      SupervisedConfig sc;
      sc.corpus = cc;
      sc.layer_dims = dims;
      sc.activation = act;
      if (rc.train_steps >= 0) sc.steps = rc.train_steps;
      auto run = TrainSupervisedToy(sc, rc.seed);
      kv.Add("train_accuracy", run.train_accuracy).Add("final_loss", run.loss_trace.back());
      enc = std::move(run.encoder);
      corpus = std::move(run.corpus);
    } else if (rc.model == "dino") {
      DinoConfig dc;
      dc.corpus = cc;
      dc.layer_dims = dims;
      dc.activation = act;
      dc.probe_size = cc.utterances;
      if (rc.train_steps >= 0) dc.steps = rc.train_steps;
      auto run = TrainDinoToy(dc, rc.seed);
      kv.Add("final_teacher_entropy", run.collapse_trace.empty() ? 0.0 : run.collapse_trace.back());
      enc = std::move(run.student);
      corpus = std::move(run.corpus);
    } else {
      throw Error(ErrorCode::kInvalidArgument, "unknown --model '" + rc.model + "'");
    }
    set = Encode(enc, corpus.sequences, "toy-" + rc.model, corpus.utterance_ids);
    labels = corpus.labels;
    kv.Add("model", rc.model).Add("layers", static_cast<int>(dims.size()));
  } else {
    throw Error(ErrorCode::kInvalidArgument, "unknown --kind '" + rc.kind + "'");
  }
  set.frame_hop = Rational::Parse(rc.frame_hop);
  SaveActivationSet(set, rc.out_dir / "acts");
  WriteLabels(rc.out_dir / "labels.txt", set.utterance_ids, labels);
  kv.Add("utterances", static_cast<int>(set.num_sequences())).Add("frame_hop", set.frame_hop.ToString());
  std::ostringstream meta;
  kv.Write(meta);
  WriteTextFile(rc.out_dir / "meta.txt", meta.str());
  out << "wrote " << set.num_layers() << "-layer activation set to "
      << (rc.out_dir / "acts").string() << "\n";
  return 0;
}

// Final mean-teacher entropy below this fraction of ln K counts as collapse.
inline constexpr double kCollapseFraction = 0.2;

inline int CmdDinoDemo(const RunConfig& rc, std::ostream& out) {
  DinoConfig cfg = rc.dino;
  cfg.centering = !rc.no_centering;
  cfg.sharpening = !rc.no_sharpening;
  const auto run = TrainDinoToy(cfg, rc.seed);
  PrepareOut(rc.out_dir);
  const double ln_k = std::log(static_cast<double>(cfg.num_outputs));
  {
    std::ostringstream csv;
    csv << "step,loss,teacher_entropy,entropy_fraction\n";
    for (std::size_t s = 0; s < run.collapse_trace.size(); ++s)
      csv << s << "," << FormatDouble(run.loss_trace[s]) << ","
          << FormatDouble(run.collapse_trace[s]) << ","
          << FormatDouble(run.collapse_trace[s] / ln_k) << "\n";
    WriteTextFile(rc.out_dir / "collapse_trace.csv", csv.str());
  }
  const double final_entropy = run.collapse_trace.empty() ? 0.0 : run.collapse_trace.back();
  const bool collapsed = final_entropy < kCollapseFraction * ln_k;
  std::ostringstream meta;
  KeyValueWriter kv;
  kv.Add("centering", cfg.centering)
      .Add("sharpening", cfg.sharpening)
      .Add("steps", cfg.steps)
      .Add("num_outputs", static_cast<std::int64_t>(cfg.num_outputs))
      .Add("student_temperature", run.state.student_temperature)
      .Add("teacher_temperature", run.state.teacher_temperature)
      .Add("ema_momentum", cfg.ema_momentum)
      .Add("center_momentum", cfg.center_momentum)
      .Add("learning_rate", cfg.learning_rate)
      .Add("augment_snr_db", cfg.augment_snr_db)
      .Add("seed", static_cast<std::int64_t>(rc.seed))
      .Add("final_entropy", final_entropy)
      .Add("ln_k", ln_k)
      .Add("collapse_threshold", kCollapseFraction * ln_k)
      .Add("collapsed", collapsed);
  kv.Write(meta);
  WriteTextFile(rc.out_dir / "meta.txt", meta.str());
  out << "final_entropy=" << FormatDouble(final_entropy) << " ln_k=" << FormatDouble(ln_k)
      << " collapse_threshold=" << FormatDouble(kCollapseFraction * ln_k)
      << " collapsed=" << (collapsed ? "yes" : "no") << "\n";
  return 0;
}

}  // namespace detail

inline int Run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  CLI::App app{"layer-wise representation similarity and probing toolkit", "layerlens"};
  app.require_subcommand(1, 1);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", rc.out_dir, "output directory")->required();
    sub->add_option("--seed", rc.seed, "run seed")->capture_default_str();
  };
  auto add_cka = [&](CLI::App* sub) {
    sub->add_option("--batch-size", rc.cka.batch_size_utterances, "utterances per minibatch")
        ->capture_default_str();
    sub->add_option("--min-frames", rc.cka.min_examples_per_batch, "minimum frames per batch")
        ->capture_default_str();
    sub->add_option("--shuffle-seed", rc.shuffle_seed, "shuffle utterance order before batching");
    sub->add_flag("--exclude-segment", rc.exclude_segment_level,
                  "leave segment-level layers out of the grid");
    sub->add_option("--threads", rc.cka.num_threads, "worker threads (0 = all cores)")
        ->capture_default_str();
    sub->add_option("--cell-px", rc.cell_px, "heatmap pixels per cell")->capture_default_str();
  };

  auto* cka = app.add_subcommand("cka", "similarity grid between two activation sets");
  cka->add_option("--acts-a", rc.acts_a, "first activation set")->required();
  cka->add_option("--acts-b", rc.acts_b, "second activation set")->required();
  add_cka(cka);
  add_common(cka);

  auto* selfsim = app.add_subcommand("selfsim", "similarity grid of a set against itself");
  selfsim->add_option("--acts", rc.acts_a, "activation set")->required();
  add_cka(selfsim);
  add_common(selfsim);

  auto* probe = app.add_subcommand("probe", "weighted-sum layer probe");
  probe->add_option("--acts", rc.acts_a, "activation set")->required();
  probe->add_option("--labels", rc.labels, "labels file: '<utterance_id> <class>' per line")
      ->required();
  probe->add_option("--projections", rc.projections, "per-layer projections: on|off")
      ->capture_default_str();
  probe->add_option("--out-dim", rc.probe.out_dim, "projected dim (0 = largest layer dim)")
      ->capture_default_str();
  probe->add_option("--lr", rc.probe.learning_rate, "learning rate")->capture_default_str();
  probe->add_option("--steps", rc.probe.steps, "gradient steps")->capture_default_str();
  probe->add_option("--weight-decay", rc.probe.weight_decay, "L2 on projections and head")
      ->capture_default_str();
  add_common(probe);

  auto* toygen = app.add_subcommand("toygen", "generate a toy activation set and labels");
  toygen->add_option("--kind", rc.kind, "encoder|planted")->capture_default_str();
  toygen->add_option("--model", rc.model, "random|smooth|bottleneck|supervised|dino")
      ->capture_default_str();
  toygen->add_option("--layers", rc.layers, "number of layers")->capture_default_str();
  toygen->add_option("--width", rc.width, "layer dim")->capture_default_str();
  toygen->add_option("--dims", rc.dims, "explicit per-layer dims")->delimiter(',');
  toygen->add_option("--input-dim", rc.input_dim, "input feature dim")->capture_default_str();
  toygen->add_option("--utterances", rc.utterances, "utterance count")->capture_default_str();
  toygen->add_option("--frames", rc.frames, "frames per utterance")->capture_default_str();
  toygen->add_option("--classes", rc.classes, "class count")->capture_default_str();
  toygen->add_option("--separation", rc.separation, "class separation")->capture_default_str();
  toygen->add_option("--noise", rc.noise, "frame noise stddev")->capture_default_str();
  toygen->add_option("--activation", rc.activation, "identity|tanh|relu")->capture_default_str();
  toygen->add_option("--init-scale", rc.init_scale, "weight init scale (1, or 0.2 for smooth)");
  toygen->add_option("--bottleneck-depth", rc.bottleneck_depth, "rank bottleneck layer index");
  toygen->add_option("--bottleneck-rank", rc.bottleneck_rank, "bottleneck rank")
      ->capture_default_str();
  toygen->add_option("--planted-layer", rc.planted_layer, "layer carrying the label signal")
      ->capture_default_str();
  toygen->add_option("--frame-hop", rc.frame_hop, "frame rate written to the manifest")
      ->capture_default_str();
  toygen->add_option("--train-steps", rc.train_steps, "training steps for trained models");
  add_common(toygen);

  auto* dino = app.add_subcommand("dino-demo", "toy self-distillation run with collapse trace");
  dino->add_flag("--no-centering", rc.no_centering, "freeze the center at zero");
  dino->add_flag("--no-sharpening", rc.no_sharpening, "teacher uses the student temperature");
  dino->add_option("--steps", rc.dino.steps, "training steps")->capture_default_str();
  dino->add_option("--lr", rc.dino.learning_rate, "student learning rate")->capture_default_str();
  dino->add_option("--student-temp", rc.dino.student_temperature)->capture_default_str();
  dino->add_option("--teacher-temp", rc.dino.teacher_temperature)->capture_default_str();
  dino->add_option("--ema", rc.dino.ema_momentum, "teacher EMA momentum")->capture_default_str();
  dino->add_option("--center-momentum", rc.dino.center_momentum)->capture_default_str();
  dino->add_option("--outputs", rc.dino.num_outputs, "output dim K")->capture_default_str();
  add_common(dino);

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (cka->parsed()) return detail::CmdCka(rc, out);
    if (selfsim->parsed()) return detail::CmdSelfsim(rc, out);
    if (probe->parsed()) return detail::CmdProbe(rc, out);
    if (toygen->parsed()) return detail::CmdToygen(rc, out);
    if (dino->parsed()) return detail::CmdDinoDemo(rc, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << "error: no subcommand\n";
  return 2;
}

}  // namespace layerlens::cli
