// Smallest end-to-end use of the library: sample a benchmark corpus, train
// one Gaussian-mixture HMM per class, classify the held-out split, and print
// the metric report.

#include <cstdio>

#include "flowhmm/hmm.hpp"
#include "flowhmm/trainer.hpp"
#include "flowhmm/synth.hpp"
#include "flowhmm/classify.hpp"
#include "flowhmm/io.hpp"

using namespace flowhmm;

int main() {
  RngStream rng(42);
  DeskConfig cfg;
  cfg.train_per_class = 60;
  cfg.test_per_class = 30;
  const DeskBenchmark bench = make_desk_benchmark(cfg, rng);
  std::printf("corpus: %zu classes, %zu train / %zu test sequences, dim %zu\n", cfg.num_classes,
              bench.train.sequences.size(), bench.test.sequences.size(), cfg.dim);

  std::vector<std::vector<Matrix>> class_data(cfg.num_classes);
  for (std::size_t i = 0; i < bench.train.sequences.size(); ++i)
    class_data[bench.train.labels[i]].push_back(bench.train.sequences[i]);

  TrainConfig tc;
  tc.outer_iters = 8;
  tc.seed = 7;
  auto models = train_class_set<GmmHmm>(
      class_data, tc,
      [](RngStream& r, const std::vector<Matrix>& d) { return make_gmm_hmm(3, 2, d, r); });

  ClassifierBank bank;
  bank.class_labels = bench.train.label_names;
  for (auto& m : models) bank.models.push_back(std::move(m));

  std::vector<std::size_t> y_pred, y_true;
  for (std::size_t i = 0; i < bench.test.sequences.size(); ++i) {
    y_pred.push_back(classify(bank, bench.test.sequences[i]).label);
    y_true.push_back(bench.test.labels[i]);
  }
  const EvalReport report = evaluate(y_pred, y_true, cfg.num_classes);
  std::printf("%s", eval_report_text(report, bank.class_labels).c_str());
  return 0;
}
