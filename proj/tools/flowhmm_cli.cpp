// Command-line surface for the sequence-classification toolkit: feature
// extraction, corpus synthesis, training, classification, vote fusion,
// evaluation, and a built-in self-test. Every subcommand is a deterministic
// function of (inputs, flags, seed); wall-clock timings go to stderr only,
// so output files and stdout are byte-identical across reruns.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "flowhmm/io.hpp"
#include "flowhmm/synth.hpp"

namespace fs = std::filesystem;
using namespace flowhmm;

namespace {

constexpr const char* kToolVersion = "1.0.0";

void print_header(const std::string& command, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::printf("# flowhmm %s (v%s)\n", command.c_str(), kToolVersion);
  std::printf("# formats: model=%u features=%u\n", kModelFormatVersion, kFeatureFormatVersion);
  std::string line;
  for (const auto& [k, v] : kv) line += (line.empty() ? "" : " ") + k + "=" + v;
  if (!line.empty()) std::printf("# config: %s\n", line.c_str());
}

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

std::vector<std::pair<std::string, std::string>> train_config_kv(const TrainConfig& cfg) {
  return {{"lr", fmt_double(cfg.learning_rate)},
          {"batch", std::to_string(cfg.batch_size)},
          {"inner-max", std::to_string(cfg.max_inner_iters)},
          {"delta", fmt_double(cfg.convergence_threshold)},
          {"streak", std::to_string(cfg.convergence_streak)},
          {"outer-iters", std::to_string(cfg.outer_iters)},
          {"seed", std::to_string(cfg.seed)}};
}

std::vector<fs::path> sorted_wavs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".wav") out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no .wav files in " + dir.string());
  return out;
}

// Loads every sequence a manifest references: archives are read once and
// looked up by utterance id. Paths are resolved relative to the manifest.
struct LoadedDataset {
  Manifest manifest;
  std::vector<Matrix> sequences;      // manifest entry order
  std::vector<std::size_t> label_ids; // index into manifest.labels
};

LoadedDataset load_dataset(const fs::path& manifest_path) {
  LoadedDataset ds;
  ds.manifest = read_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();

  std::map<std::string, std::map<std::string, const Matrix*>> archives;
  std::map<std::string, std::vector<FeatureRecord>> storage;
  std::map<std::string, std::size_t> label_index;
  for (std::size_t c = 0; c < ds.manifest.labels.size(); ++c) label_index[ds.manifest.labels[c]] = c;

  for (const auto& entry : ds.manifest.entries) {
    if (!storage.count(entry.path)) {
      auto records = read_features(base / entry.path);
      auto& by_id = archives[entry.path];
      storage[entry.path] = std::move(records);
      for (const auto& rec : storage[entry.path]) by_id[rec.id] = &rec.features;
    }
    const auto& by_id = archives[entry.path];
    const auto it = by_id.find(entry.id);
    if (it == by_id.end())
      throw IoError("utterance '" + entry.id + "' not found in archive " + entry.path);
    ds.sequences.push_back(*it->second);
    ds.label_ids.push_back(label_index.at(entry.label));
  }
  return ds;
}

std::string feature_id(const char* split, const std::string& label, std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04zu", index);
  return std::string(split) + "_" + label + "_" + buf;
}

void write_corpus_split(const fs::path& dir, const char* split, const Corpus& corpus) {
  std::vector<FeatureRecord> records;
  Manifest mf;
  mf.labels = corpus.label_names;
  const std::string arc_name = std::string(split) + ".arc";
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
    const std::string& label = corpus.label_names[corpus.labels[i]];
    const std::string id = feature_id(split, label, i);
    records.push_back({id, corpus.sequences[i]});
    mf.entries.push_back({id, arc_name, label});
  }
  write_features(dir / arc_name, records);
  write_manifest(dir / (std::string(split) + ".manifest"), mf);
}

Corpus corpus_from_dataset(const LoadedDataset& ds) {
  Corpus corpus;
  corpus.label_names = ds.manifest.labels;
  corpus.sequences = ds.sequences;
  corpus.labels = ds.label_ids;
  return corpus;
}

// ---------------------------------------------------------------------------
// features extract / features noise
// ---------------------------------------------------------------------------

struct ExtractArgs {
  std::string wav_dir, out, mfcc_config, manifest_in, manifest_out;
  bool no_deltas = false, no_cmvn = false;
};

MfccConfig load_mfcc_config(const std::string& path) {
  MfccConfig cfg;
  if (path.empty()) return cfg;
  const std::string label = path;
  const nlohmann::json j = flowhmm::detail::parse_json_strict(flowhmm::detail::read_file_bytes(path), label);
  flowhmm::detail::check_keys(j, label, {},
                              {"num_ceps", "window_ms", "shift_ms", "num_mel_filters", "fft_size",
                               "preemphasis", "low_freq_hz", "high_freq_hz"});
  if (j.contains("num_ceps")) cfg.num_ceps = flowhmm::detail::get_size_field(j, "num_ceps", label);
  if (j.contains("window_ms")) cfg.window_ms = flowhmm::detail::get_f64_field(j, "window_ms", label);
  if (j.contains("shift_ms")) cfg.shift_ms = flowhmm::detail::get_f64_field(j, "shift_ms", label);
  if (j.contains("num_mel_filters"))
    cfg.num_mel_filters = flowhmm::detail::get_size_field(j, "num_mel_filters", label);
  if (j.contains("fft_size")) cfg.fft_size = flowhmm::detail::get_size_field(j, "fft_size", label);
  if (j.contains("preemphasis")) cfg.preemphasis = flowhmm::detail::get_f64_field(j, "preemphasis", label);
  if (j.contains("low_freq_hz")) cfg.low_freq_hz = flowhmm::detail::get_f64_field(j, "low_freq_hz", label);
  if (j.contains("high_freq_hz")) cfg.high_freq_hz = flowhmm::detail::get_f64_field(j, "high_freq_hz", label);
  return cfg;
}

int run_extract(const ExtractArgs& args) {
  print_header("features extract",
               {{"wav-dir", args.wav_dir},
                {"out", args.out},
                {"deltas", args.no_deltas ? "off" : "on"},
                {"cmvn", args.no_cmvn ? "off" : "on"}});
  const MfccConfig cfg = load_mfcc_config(args.mfcc_config);

  std::vector<FeatureRecord> records;
  std::size_t constant_dim_utterances = 0;
  for (const fs::path& wav : sorted_wavs(args.wav_dir)) {
    const Waveform w = read_wav(wav);
    Matrix feats = extract_mfcc(w, cfg);
    if (!args.no_deltas) feats = append_deltas(feats);
    if (!args.no_cmvn) {
      CmvnResult res = cmvn(feats);
      feats = std::move(res.features);
      if (!res.constant_dims.empty()) ++constant_dim_utterances;
    }
    records.push_back({wav.stem().string(), std::move(feats)});
  }
  write_features(args.out, records);
  std::printf("wrote %zu utterances to %s (%zu-dim frames)\n", records.size(), args.out.c_str(),
              records.front().features.cols);
  if (constant_dim_utterances > 0)
    std::printf("note: %zu utterances had constant feature dimensions (centered only)\n",
                constant_dim_utterances);

  if (!args.manifest_in.empty() || !args.manifest_out.empty()) {
    if (args.manifest_in.empty() || args.manifest_out.empty())
      throw std::invalid_argument("features extract: --manifest-in and --manifest-out go together");
    const Manifest in = read_manifest(args.manifest_in);
    std::set<std::string> extracted;
    for (const auto& rec : records) extracted.insert(rec.id);
    Manifest out;
    out.labels = in.labels;
    const fs::path rel = fs::path(args.out).filename();
    for (const auto& entry : in.entries) {
      if (!extracted.count(entry.id))
        throw IoError("manifest id '" + entry.id + "' has no extracted utterance");
      out.entries.push_back({entry.id, rel.string(), entry.label});
    }
    write_manifest(args.manifest_out, out);
    std::printf("rewrote manifest to %s\n", args.manifest_out.c_str());
  }
  return 0;
}

struct NoiseArgs {
  std::string in_dir, out_dir, kind = "white", noise_file;
  double snr_db = 20.0;
  std::uint64_t seed = 0;
};

int run_noise(const NoiseArgs& args) {
  print_header("features noise", {{"in", args.in_dir},
                                  {"out", args.out_dir},
                                  {"snr", fmt_double(args.snr_db)},
                                  {"kind", args.kind},
                                  {"seed", std::to_string(args.seed)}});
  if (args.kind != "white" && args.kind != "pink" && args.kind != "file")
    throw std::invalid_argument("features noise: --kind must be white, pink, or file");
  if (args.kind == "file" && args.noise_file.empty())
    throw std::invalid_argument("features noise: --kind file needs --noise-file");

  Waveform file_noise;
  if (args.kind == "file") file_noise = read_wav(args.noise_file);

  std::error_code ec;
  fs::create_directories(args.out_dir, ec);
  if (ec) throw IoError("cannot create directory " + args.out_dir + ": " + ec.message());

  const RngStream root(args.seed);
  std::size_t total_clipped = 0, index = 0;
  const auto wavs = sorted_wavs(args.in_dir);
  for (const fs::path& wav : wavs) {
    RngStream rng = root.split(index++);
    const Waveform speech = read_wav(wav);
    Waveform noise;
    if (args.kind == "file") {
      noise = file_noise;
    } else {
      noise = gen_noise(args.kind == "white" ? NoiseKind::white : NoiseKind::pink,
                        speech.samples.size(), speech.sample_rate, rng);
    }
    const MixResult mixed = mix_noise(speech, noise, args.snr_db, rng);
    total_clipped += mixed.clipped;
    write_wav(fs::path(args.out_dir) / wav.filename(), mixed.wave);
  }
  std::printf("mixed %s noise at %s dB into %zu files (%zu samples clipped)\n", args.kind.c_str(),
              fmt_double(args.snr_db).c_str(), wavs.size(), total_clipped);
  return 0;
}

// ---------------------------------------------------------------------------
// synth make / synth warp
// ---------------------------------------------------------------------------

struct SynthMakeArgs {
  std::string preset = "desk", out;
  std::uint64_t seed = 0;
  std::size_t train_per_class = 0, test_per_class = 0;  // 0 keeps the preset default
};

int run_synth_make(const SynthMakeArgs& args) {
  print_header("synth make", {{"preset", args.preset},
                              {"out", args.out},
                              {"seed", std::to_string(args.seed)}});
  std::error_code ec;
  fs::create_directories(args.out, ec);
  if (ec) throw IoError("cannot create directory " + args.out + ": " + ec.message());
  RngStream rng(args.seed);

  if (args.preset == "desk") {
    DeskConfig cfg;
    if (args.train_per_class > 0) cfg.train_per_class = args.train_per_class;
    if (args.test_per_class > 0) cfg.test_per_class = args.test_per_class;
    const DeskBenchmark bench = make_desk_benchmark(cfg, rng);
    write_corpus_split(args.out, "train", bench.train);
    write_corpus_split(args.out, "test", bench.test);
    std::printf("desk benchmark: %zu classes, %zu train / %zu test sequences\n",
                cfg.num_classes, bench.train.sequences.size(), bench.test.sequences.size());
    return 0;
  }
  if (args.preset == "desk-audio") {
    DeskAudioConfig cfg;
    if (args.train_per_class > 0) cfg.train_per_class = args.train_per_class;
    if (args.test_per_class > 0) cfg.test_per_class = args.test_per_class;
    const DeskAudio audio = make_desk_audio(cfg, rng);
    const fs::path wav_dir = fs::path(args.out) / "wavs";
    fs::create_directories(wav_dir, ec);
    if (ec) throw IoError("cannot create directory " + wav_dir.string() + ": " + ec.message());

    const auto write_split = [&](const char* split, const AudioCorpus& corpus) {
      Manifest mf;
      mf.labels = corpus.label_names;
      for (std::size_t i = 0; i < corpus.waves.size(); ++i) {
        const std::string& label = corpus.label_names[corpus.labels[i]];
        const std::string id = feature_id(split, label, i);
        write_wav(wav_dir / (id + ".wav"), corpus.waves[i]);
        mf.entries.push_back({id, "wavs/" + id + ".wav", label});
      }
      write_manifest(fs::path(args.out) / (std::string(split) + "_wavs.manifest"), mf);
    };
    write_split("train", audio.train);
    write_split("test", audio.test);
    std::printf("desk audio: %zu classes, %zu train / %zu test utterances at %s Hz\n",
                cfg.num_classes, audio.train.waves.size(), audio.test.waves.size(),
                fmt_double(cfg.sample_rate).c_str());
    return 0;
  }
  throw std::invalid_argument("synth make: unknown preset '" + args.preset + "' (desk, desk-audio)");
}

struct SynthWarpArgs {
  std::string in_dir, out_dir;
  std::uint64_t seed = 0;
  double strength = 0.8;
  std::size_t passes = 1;
  bool standardize = false;
};

int run_synth_warp(const SynthWarpArgs& args) {
  print_header("synth warp", {{"in", args.in_dir},
                              {"out", args.out_dir},
                              {"seed", std::to_string(args.seed)},
                              {"strength", fmt_double(args.strength)},
                              {"passes", std::to_string(args.passes)},
                              {"standardize", args.standardize ? "on" : "off"}});
  if (args.passes == 0) throw std::invalid_argument("synth warp: --passes must be >= 1");
  std::error_code ec;
  fs::create_directories(args.out_dir, ec);
  if (ec) throw IoError("cannot create directory " + args.out_dir + ": " + ec.message());

  LoadedDataset train_ds = load_dataset(fs::path(args.in_dir) / "train.manifest");
  LoadedDataset test_ds = load_dataset(fs::path(args.in_dir) / "test.manifest");
  Corpus train = corpus_from_dataset(train_ds);
  Corpus test = corpus_from_dataset(test_ds);
  if (train.sequences.empty()) throw IoError("synth warp: empty train split");

  RngStream rng(args.seed);
  const std::size_t dim = train.sequences.front().cols;
  for (std::size_t pass = 0; pass < args.passes; ++pass) {
    const CubicWarp warp = make_cubic_warp(dim, args.strength, rng);
    train = make_warped_corpus(train, warp);
    test = make_warped_corpus(test, warp);
  }
  if (args.standardize) {
    const Standardizer st = fit_standardizer(train);
    train = apply_standardizer(st, train);
    test = apply_standardizer(st, test);
  }
  write_corpus_split(args.out_dir, "train", train);
  write_corpus_split(args.out_dir, "test", test);
  std::printf("warped %zu train / %zu test sequences (%zu pass%s)\n", train.sequences.size(),
              test.sequences.size(), args.passes, args.passes == 1 ? "" : "es");
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string model = "gmm", data, out;
  std::size_t states = 3, nmix = 2;
  std::size_t coupling_layers = 4, flow_steps = 2, hidden = 16;
  std::size_t jobs = 1;
  TrainConfig cfg;
};

int run_train(const TrainArgs& args) {
  auto kv = train_config_kv(args.cfg);
  kv.insert(kv.begin(), {{"model", args.model},
                         {"data", args.data},
                         {"states", std::to_string(args.states)},
                         {"nmix", std::to_string(args.nmix)}});
  if (args.model == "nvp") kv.push_back({"coupling-layers", std::to_string(args.coupling_layers)});
  if (args.model == "glow") kv.push_back({"flow-steps", std::to_string(args.flow_steps)});
  if (args.model != "gmm") kv.push_back({"hidden", std::to_string(args.hidden)});
  print_header("train", kv);
  validate_config(args.cfg);

  const LoadedDataset ds = load_dataset(args.data);
  const std::size_t C = ds.manifest.labels.size();
  std::vector<std::vector<Matrix>> class_data(C);
  for (std::size_t i = 0; i < ds.sequences.size(); ++i)
    class_data[ds.label_ids[i]].push_back(ds.sequences[i]);
  for (std::size_t c = 0; c < C; ++c)
    if (class_data[c].empty())
      throw std::invalid_argument("train: class '" + ds.manifest.labels[c] + "' has no sequences");
  const std::size_t D = ds.sequences.front().cols;

  const auto t0 = std::chrono::steady_clock::now();
  ModelContainer mc;
  mc.bank.class_labels = ds.manifest.labels;
  mc.train_config = args.cfg;
  mc.seed = args.cfg.seed;
  std::vector<TrainLog> logs;

  if (args.model == "gmm") {
    auto bank = train_class_set<GmmHmm>(
        class_data, args.cfg,
        [&](RngStream& rng, const std::vector<Matrix>& data) {
          return make_gmm_hmm(args.states, args.nmix, data, rng);
        },
        args.jobs, &logs);
    for (auto& m : bank) mc.bank.models.push_back(std::move(m));
  } else if (args.model == "nvp") {
    auto bank = train_class_set<NvpHmm>(
        class_data, args.cfg,
        [&](RngStream& rng, const std::vector<Matrix>&) {
          return make_nvp_hmm(args.states, args.nmix, D, args.coupling_layers, args.hidden, rng);
        },
        args.jobs, &logs);
    for (auto& m : bank) mc.bank.models.push_back(std::move(m));
  } else if (args.model == "glow") {
    auto bank = train_class_set<GlowHmm>(
        class_data, args.cfg,
        [&](RngStream& rng, const std::vector<Matrix>&) {
          return make_glow_hmm(args.states, args.nmix, D, args.flow_steps, args.hidden, rng);
        },
        args.jobs, &logs);
    for (auto& m : bank) mc.bank.models.push_back(std::move(m));
  } else {
    throw std::invalid_argument("train: unknown model '" + args.model + "' (gmm, nvp, glow)");
  }
  const auto t1 = std::chrono::steady_clock::now();

  save_model(args.out, mc);
  for (std::size_t c = 0; c < logs.size(); ++c) {
    TrainLog scrubbed = logs[c];
    for (auto& e : scrubbed) e.wall_ms = 0.0;  // keep output files seed-deterministic
    write_train_log(fs::path(args.out) / ("train_log.class" + std::to_string(c) + ".jsonl"), scrubbed);
  }
  for (std::size_t c = 0; c < logs.size(); ++c)
    std::printf("class %s: final nll %s after %zu outer iterations\n", ds.manifest.labels[c].c_str(),
                fmt_double(logs[c].empty() ? 0.0 : logs[c].back().nll).c_str(), logs[c].size());
  std::printf("saved %s bank (%zu classes) to %s\n", args.model.c_str(), C, args.out.c_str());
  std::fprintf(stderr, "training took %.1f s\n",
               std::chrono::duration<double>(t1 - t0).count());
  return 0;
}

// ---------------------------------------------------------------------------
// classify / fuse / eval
// ---------------------------------------------------------------------------

struct ClassifyArgs {
  std::string models, data, out;
  std::size_t jobs = 1;
};

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = s.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

int run_classify(const ClassifyArgs& args) {
  print_header("classify", {{"models", args.models}, {"data", args.data}, {"out", args.out}});
  const std::vector<std::string> dirs = split_commas(args.models);
  if (dirs.empty() || dirs.front().empty())
    throw std::invalid_argument("classify: --models needs at least one directory");

  const LoadedDataset ds = load_dataset(args.data);
  const std::size_t N = ds.sequences.size();
  if (N == 0) throw std::invalid_argument("classify: manifest has no utterances");

  for (std::size_t m = 0; m < dirs.size(); ++m) {
    const ModelContainer mc = load_model(dirs[m]);
    std::vector<std::size_t> pred_ids(N);

    const std::size_t jobs = std::max<std::size_t>(1, args.jobs);
    if (jobs == 1) {
      for (std::size_t i = 0; i < N; ++i) pred_ids[i] = classify(mc.bank, ds.sequences[i]).label;
    } else {
      std::vector<std::thread> pool;
      std::atomic<std::size_t> next{0};
      for (std::size_t w = 0; w < jobs; ++w)
        pool.emplace_back([&] {
          while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= N) return;
            pred_ids[i] = classify(mc.bank, ds.sequences[i]).label;
          }
        });
      for (auto& th : pool) th.join();
    }

    PredictionFile pf;
    pf.labels = mc.bank.class_labels;
    for (std::size_t i = 0; i < N; ++i)
      pf.entries.push_back({ds.manifest.entries[i].id, mc.bank.class_labels[pred_ids[i]]});
    const std::string out_path = dirs.size() == 1 ? args.out : args.out + "." + std::to_string(m);
    write_predictions(out_path, pf);

    std::size_t correct = 0;
    for (std::size_t i = 0; i < N; ++i)
      if (pf.entries[i].label == ds.manifest.entries[i].label) ++correct;
    std::printf("%s: accuracy %.4f (%zu/%zu) -> %s\n", dirs[m].c_str(),
                static_cast<double>(correct) / static_cast<double>(N), correct, N, out_path.c_str());
  }
  return 0;
}

struct FuseArgs {
  std::string preds, out;
  std::uint64_t seed = 0;
};

int run_fuse(const FuseArgs& args) {
  print_header("fuse", {{"preds", args.preds}, {"seed", std::to_string(args.seed)}, {"out", args.out}});
  const std::vector<std::string> paths = split_commas(args.preds);
  if (paths.size() < 2) throw std::invalid_argument("fuse: need at least two prediction files");

  std::vector<PredictionFile> files;
  for (const auto& p : paths) files.push_back(read_predictions(p));
  for (std::size_t f = 1; f < files.size(); ++f) {
    if (files[f].labels != files[0].labels)
      throw std::invalid_argument("fuse: prediction files declare different label sets");
    if (files[f].entries.size() != files[0].entries.size())
      throw std::invalid_argument("fuse: prediction files cover different utterance counts");
  }
  std::map<std::string, std::size_t> label_index;
  for (std::size_t c = 0; c < files[0].labels.size(); ++c) label_index[files[0].labels[c]] = c;

  std::vector<std::map<std::string, std::size_t>> by_id(files.size());
  for (std::size_t f = 0; f < files.size(); ++f)
    for (const auto& e : files[f].entries) by_id[f][e.id] = label_index.at(e.label);

  RngStream rng(args.seed);
  PredictionFile fused;
  fused.labels = files[0].labels;
  std::size_t disagreements = 0;
  for (const auto& e : files[0].entries) {
    std::vector<std::size_t> votes;
    votes.push_back(label_index.at(e.label));
    for (std::size_t f = 1; f < files.size(); ++f) {
      const auto it = by_id[f].find(e.id);
      if (it == by_id[f].end())
        throw std::invalid_argument("fuse: utterance '" + e.id + "' missing from " + paths[f]);
      votes.push_back(it->second);
    }
    const std::set<std::size_t> unique(votes.begin(), votes.end());
    if (unique.size() == votes.size() && votes.size() > 1) ++disagreements;
    fused.entries.push_back({e.id, fused.labels[vote(votes, rng)]});
  }
  write_predictions(args.out, fused);
  std::printf("fused %zu files over %zu utterances (%zu full disagreements) -> %s\n", files.size(),
              fused.entries.size(), disagreements, args.out.c_str());
  return 0;
}

struct EvalArgs {
  std::string pred, truth, report;
  bool by_class = false;
};

int run_eval(const EvalArgs& args) {
  print_header("eval", {{"pred", args.pred}, {"truth", args.truth}, {"report", args.report}});
  const PredictionFile pf = read_predictions(args.pred);
  const Manifest truth = read_manifest(args.truth);
  if (pf.labels != truth.labels)
    throw std::invalid_argument("eval: prediction and truth label sets differ");

  std::map<std::string, std::size_t> label_index;
  for (std::size_t c = 0; c < truth.labels.size(); ++c) label_index[truth.labels[c]] = c;
  std::map<std::string, std::size_t> pred_by_id;
  for (const auto& e : pf.entries) pred_by_id[e.id] = label_index.at(e.label);

  std::vector<std::size_t> y_true, y_pred;
  for (const auto& e : truth.entries) {
    const auto it = pred_by_id.find(e.id);
    if (it == pred_by_id.end())
      throw std::invalid_argument("eval: utterance '" + e.id + "' has no prediction");
    y_true.push_back(label_index.at(e.label));
    y_pred.push_back(it->second);
  }
  if (pf.entries.size() != truth.entries.size())
    throw std::invalid_argument("eval: prediction file covers utterances outside the truth manifest");

  const EvalReport rep = evaluate(y_pred, y_true, truth.labels.size());
  flowhmm::detail::atomic_write_file(args.report, eval_report_text(rep, truth.labels));
  flowhmm::detail::atomic_write_file(args.report + ".json", eval_report_to_json(rep, truth.labels).dump(2) + "\n");

  std::printf("accuracy %.4f over %zu utterances\n", rep.accuracy, y_true.size());
  if (args.by_class) std::printf("%s", eval_report_text(rep, truth.labels).c_str());
  std::printf("report written to %s and %s.json\n", args.report.c_str(), args.report.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

struct SelfCheck {
  std::string name;
  bool ok;
  std::string detail;
};

void check(std::vector<SelfCheck>& out, const std::string& name, bool ok, const std::string& detail = "") {
  out.push_back({name, ok, detail});
  std::printf("[%s] %s%s%s\n", ok ? "ok" : "FAIL", name.c_str(), detail.empty() ? "" : ": ",
              detail.c_str());
}

// Joint-probability enumeration for a two-state chain: sums p(path, x) over
// all S^T state paths, which the forward pass must match.
double enumerate_log_likelihood(const GmmHmm& model, const Matrix& seq) {
  const std::size_t S = model.states(), T = seq.rows;
  std::vector<std::size_t> path(T, 0);
  double total = 0.0;
  while (true) {
    double logp = model.chain.log_q[path[0]] + model.emission.log_pdf(path[0], seq.row(0));
    for (std::size_t t = 1; t < T; ++t)
      logp += model.chain.log_A(path[t - 1], path[t]) + model.emission.log_pdf(path[t], seq.row(t));
    total += std::exp(logp);
    std::size_t t = 0;
    while (t < T && ++path[t] == S) path[t++] = 0;
    if (t == T) break;
  }
  return std::log(total);
}

int run_selftest(bool fast) {
  print_header("selftest", {{"fast", fast ? "on" : "off"}});
  std::vector<SelfCheck> checks;

  {
    RngStream a(42), b(42);
    bool same = true;
    for (int i = 0; i < 1000; ++i) same = same && a.next_u64() == b.next_u64();
    check(checks, "rng determinism", same);
  }
  {
    RngStream rng(7);
    std::vector<Matrix> data;
    for (int i = 0; i < 4; ++i) {
      Matrix seq(6, 3);
      for (auto& v : seq.data) v = rng.normal();
      data.push_back(std::move(seq));
    }
    const GmmHmm model = make_gmm_hmm(2, 2, data, rng);
    double worst = 0.0;
    for (int i = 0; i < 5; ++i) {
      Matrix seq(3, 3);
      for (auto& v : seq.data) v = rng.normal();
      worst = std::max(worst, std::abs(sequence_log_likelihood(model, seq) -
                                       enumerate_log_likelihood(model, seq)));
    }
    check(checks, "forward matches path enumeration", worst < 1e-9,
          "max abs err " + fmt_double(worst));
  }
  {
    RngStream rng(11);
    NvpStack nvp = make_nvp_stack(8, 4, 8, rng, 0.3);
    GlowStack glow = make_glow_stack(8, 2, 8, rng, 0.3);
    std::vector<std::vector<double>> frames;
    for (int i = 0; i < 32; ++i) frames.push_back(rng.normal_vector(8));
    glow_initialize(glow, frames);
    double worst_nvp = 0.0, worst_glow = 0.0;
    for (int i = 0; i < 200; ++i) {
      const auto x = rng.normal_vector(8);
      const auto xn = nvp.inverse(nvp.forward(x).first);
      const auto xg = glow.inverse(glow.forward(x).first);
      for (std::size_t d = 0; d < 8; ++d) {
        worst_nvp = std::max(worst_nvp, std::abs(xn[d] - x[d]));
        worst_glow = std::max(worst_glow, std::abs(xg[d] - x[d]));
      }
    }
    check(checks, "flow bijectivity", worst_nvp < 1e-9 && worst_glow < 1e-8,
          "nvp " + fmt_double(worst_nvp) + ", glow " + fmt_double(worst_glow));
  }
  {
    RngStream rng(13);
    const NvpHmm nvp = make_nvp_hmm(2, 2, 3, 2, 6, rng);
    GlowHmm glow;
    glow.chain = nvp.chain;
    glow.emission.num_states = 2;
    glow.emission.num_components = 2;
    glow.emission.dim = 3;
    glow.emission.log_weights = Matrix(2, 2, std::log(0.5));
    glow.emission.flows.assign(2, std::vector<GlowStack>(2, make_identity_glow(3, 2, 6)));
    GmmHmm unit;
    unit.chain = nvp.chain;
    Matrix w(2, 1, 1.0);
    std::vector<Matrix> mu(2, Matrix(1, 3, 0.0)), var(2, Matrix(1, 3, 1.0));
    unit.emission = make_gmm(w, std::move(mu), var);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      Matrix seq(5, 3);
      for (auto& v : seq.data) v = rng.normal();
      const double base = sequence_log_likelihood(unit, seq);
      worst = std::max(worst, std::abs(sequence_log_likelihood(nvp, seq) - base));
      worst = std::max(worst, std::abs(sequence_log_likelihood(glow, seq) - base));
    }
    check(checks, "identity flows equal the unit Gaussian", worst < 1e-10,
          "max abs err " + fmt_double(worst));
  }
  {
    bool ok = true;
    RngStream rng(17);
    for (std::size_t a = 0; a < 3 && ok; ++a)
      for (std::size_t b = 0; b < 3 && ok; ++b)
        for (std::size_t c = 0; c < 3 && ok; ++c) {
          const std::size_t got = vote({a, b, c}, rng);
          if (a == b || a == c) ok = got == a;
          else if (b == c) ok = got == b;
          else ok = got == a || got == b || got == c;
        }
    check(checks, "majority vote truth table", ok);
  }
  {
    RngStream rng(19);
    std::vector<std::size_t> y_true, y_pred;
    for (int i = 0; i < 500; ++i) {
      y_true.push_back(rng.uniform_index(4));
      y_pred.push_back(rng.uniform_index(4));
    }
    const EvalReport rep = evaluate(y_pred, y_true, 4);
    check(checks, "weighted recall equals accuracy",
          std::abs(rep.weighted_recall - rep.accuracy) < 1e-12);
  }
  {
    const fs::path dir = fs::temp_directory_path() / "flowhmm_selftest";
    fs::remove_all(dir);
    RngStream rng(23);
    ModelContainer mc;
    mc.bank.models.push_back(make_nvp_hmm(2, 1, 3, 2, 4, rng, 0.1));
    mc.bank.class_labels = {"only"};
    save_model(dir / "bank", mc);
    const ModelContainer back = load_model(dir / "bank");
    Matrix seq(4, 3);
    for (auto& v : seq.data) v = rng.normal();
    const bool ok = any_log_likelihood(back.bank.models[0], seq) ==
                    any_log_likelihood(mc.bank.models[0], seq);
    fs::remove_all(dir);
    check(checks, "model io bitwise round trip", ok);
  }
  if (!fast) {
    {
      RngStream rng(29);
      DeskConfig cfg;
      cfg.num_classes = 1;
      cfg.train_per_class = 20;
      cfg.test_per_class = 1;
      cfg.min_length = 10;
      cfg.max_length = 20;
      const DeskBenchmark bench = make_desk_benchmark(cfg, rng);
      TrainConfig tc;
      tc.outer_iters = 5;
      tc.seed = 3;
      GmmHmm model = make_gmm_hmm(3, 2, bench.train.sequences, rng);
      const TrainLog log = train_outer(model, bench.train.sequences, tc);
      bool monotone = true;
      for (std::size_t i = 1; i < log.size(); ++i)
        if (log[i].nll > log[i - 1].nll + 1e-8) monotone = false;
      check(checks, "gmm em monotone descent", monotone);
    }
    {
      RngStream rng(31);
      std::vector<Matrix> data;
      for (int i = 0; i < 16; ++i) {
        Matrix seq(10, 2);
        for (std::size_t t = 0; t < 10; ++t) {
          seq(t, 0) = rng.normal() + (t % 2 == 0 ? 1.5 : -1.5);
          seq(t, 1) = rng.normal() * 0.5;
        }
        data.push_back(std::move(seq));
      }
      TrainConfig tc;
      tc.outer_iters = 3;
      tc.max_inner_iters = 4;
      tc.batch_size = 8;
      tc.seed = 5;
      NvpHmm model = make_nvp_hmm(2, 1, 2, 2, 6, rng, 0.1);
      const TrainLog log = train_outer(model, data, tc);
      check(checks, "nvp hybrid training reduces nll", log.back().nll < log.front().nll + 1e-9,
            "first " + fmt_double(log.front().nll) + ", last " + fmt_double(log.back().nll));
    }
  }

  std::size_t failed = 0;
  for (const auto& c : checks)
    if (!c.ok) ++failed;
  std::printf("%zu/%zu checks passed\n", checks.size() - failed, checks.size());
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HMM sequence classification with normalizing-flow mixture emissions"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("flowhmm ") + kToolVersion);

  // features
  auto* features = app.add_subcommand("features", "feature extraction and noise injection");
  features->require_subcommand(1);

  ExtractArgs ex;
  auto* extract = features->add_subcommand("extract", "MFCC pipeline over a directory of WAV files");
  extract->add_option("--wav-dir", ex.wav_dir, "directory of mono .wav files")->required();
  extract->add_option("--out", ex.out, "output feature archive")->required();
  extract->add_option("--mfcc-config", ex.mfcc_config, "JSON file with MFCC settings");
  extract->add_flag("--no-deltas", ex.no_deltas, "skip delta and delta-delta features");
  extract->add_flag("--no-cmvn", ex.no_cmvn, "skip per-utterance mean/variance normalization");
  extract->add_option("--manifest-in", ex.manifest_in, "wav manifest to rewrite against the archive");
  extract->add_option("--manifest-out", ex.manifest_out, "where to write the rewritten manifest");

  NoiseArgs no;
  auto* noise = features->add_subcommand("noise", "mix noise into WAV files at a target SNR");
  noise->add_option("--in", no.in_dir, "directory of source .wav files")->required();
  noise->add_option("--out", no.out_dir, "output directory for noisy files")->required();
  noise->add_option("--snr", no.snr_db, "signal-to-noise ratio in dB")->required();
  noise->add_option("--kind", no.kind, "white, pink, or file");
  noise->add_option("--noise-file", no.noise_file, "noise WAV when --kind file");
  noise->add_option("--seed", no.seed, "random seed");

  // synth
  auto* synth = app.add_subcommand("synth", "synthetic benchmark corpora");
  synth->require_subcommand(1);

  SynthMakeArgs sm;
  auto* make = synth->add_subcommand("make", "generate a benchmark corpus");
  make->add_option("--preset", sm.preset, "desk or desk-audio");
  make->add_option("--out", sm.out, "output directory")->required();
  make->add_option("--seed", sm.seed, "random seed");
  make->add_option("--train-per-class", sm.train_per_class, "override training sequences per class");
  make->add_option("--test-per-class", sm.test_per_class, "override test sequences per class");

  SynthWarpArgs sw;
  auto* warp = synth->add_subcommand("warp", "pass a feature corpus through an invertible cubic warp");
  warp->add_option("--in", sw.in_dir, "directory holding train/test manifests and archives")->required();
  warp->add_option("--out", sw.out_dir, "output directory")->required();
  warp->add_option("--seed", sw.seed, "random seed for the warp");
  warp->add_option("--strength", sw.strength, "cubic coefficient");
  warp->add_option("--passes", sw.passes, "apply this many stacked warps");
  warp->add_flag("--standardize", sw.standardize, "standardize with train-split statistics after warping");

  // train
  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train a per-class model bank");
  train->add_option("--model", tr.model, "gmm, nvp, or glow")->required();
  train->add_option("--data", tr.data, "training manifest")->required();
  train->add_option("--out", tr.out, "output model directory")->required();
  train->add_option("--states", tr.states, "HMM states per class");
  train->add_option("--nmix", tr.nmix, "mixture components per state");
  train->add_option("--lr", tr.cfg.learning_rate, "Adam learning rate");
  train->add_option("--batch", tr.cfg.batch_size, "sequences per minibatch");
  train->add_option("--delta", tr.cfg.convergence_threshold, "relative improvement threshold");
  train->add_option("--streak", tr.cfg.convergence_streak, "epochs under threshold before stopping");
  train->add_option("--inner-max", tr.cfg.max_inner_iters, "max gradient epochs per outer iteration");
  train->add_option("--outer-iters", tr.cfg.outer_iters, "EM outer iterations");
  train->add_option("--seed", tr.cfg.seed, "random seed");
  train->add_option("--coupling-layers", tr.coupling_layers, "RealNVP coupling layers");
  train->add_option("--flow-steps", tr.flow_steps, "Glow steps");
  train->add_option("--hidden", tr.hidden, "conditioner hidden width");
  train->add_option("--jobs", tr.jobs, "parallel class workers (results independent of N)");

  // classify / fuse / eval
  ClassifyArgs cl;
  auto* classify_cmd = app.add_subcommand("classify", "label utterances with one or more model banks");
  classify_cmd->add_option("--models", cl.models, "model directory, or a comma-separated list")->required();
  classify_cmd->add_option("--data", cl.data, "manifest of utterances to classify")->required();
  classify_cmd->add_option("--out", cl.out, "prediction file (suffixed .N for extra banks)")->required();
  classify_cmd->add_option("--jobs", cl.jobs, "parallel utterance workers (results independent of N)");

  FuseArgs fu;
  auto* fuse_cmd = app.add_subcommand("fuse", "majority-vote fusion of prediction files");
  fuse_cmd->add_option("--preds", fu.preds, "comma-separated prediction files")->required();
  fuse_cmd->add_option("--seed", fu.seed, "seed for disagreement tie-breaking");
  fuse_cmd->add_option("--out", fu.out, "fused prediction file")->required();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "score predictions against a truth manifest");
  eval_cmd->add_option("--pred", ev.pred, "prediction file")->required();
  eval_cmd->add_option("--truth", ev.truth, "truth manifest")->required();
  eval_cmd->add_option("--report", ev.report, "report path (text, plus .json record)")->required();
  eval_cmd->add_flag("--by-class", ev.by_class, "print the per-class table");

  bool fast = false;
  auto* selftest = app.add_subcommand("selftest", "run the built-in invariant checks");
  selftest->add_flag("--fast", fast, "skip the training-based checks");

  // One config flag for the whole tool; INI sections name the subcommand
  // ([train], [features.extract]) and command-line flags win.
  app.set_config("--config", "", "read defaults from an INI config file (flags win)");
  for (CLI::App* cmd : {features, synth, extract, noise, make, warp, train, classify_cmd,
                        fuse_cmd, eval_cmd, selftest})
    cmd->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    std::fprintf(stderr, "error: %s\n", e.what());
    std::fprintf(stderr, "run 'flowhmm --help' for usage\n");
    return 2;
  }

  try {
    if (extract->parsed()) return run_extract(ex);
    if (noise->parsed()) return run_noise(no);
    if (make->parsed()) return run_synth_make(sm);
    if (warp->parsed()) return run_synth_warp(sw);
    if (train->parsed()) return run_train(tr);
    if (classify_cmd->parsed()) return run_classify(cl);
    if (fuse_cmd->parsed()) return run_fuse(fu);
    if (eval_cmd->parsed()) return run_eval(ev);
    if (selftest->parsed()) return run_selftest(fast);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  std::fprintf(stderr, "error: no subcommand\n");
  return 2;
}
