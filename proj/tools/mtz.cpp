// mtz: train single-task models, zip them into a multi-task network,
// evaluate, and inspect. Exit codes: 0 success, 2 flag/config errors,
// 1 runtime errors.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mtz/data.hpp"
#include "mtz/serialize.hpp"
#include "mtz/trainer.hpp"
#include "mtz/zipper.hpp"

namespace {

using namespace mtz;

// A dataset argument is either "synth:<task spec>" or a directory holding
// MNIST-style IDX files (train-images-idx3-ubyte etc.). The MTZ_DATA_DIR
// environment variable supplies a default directory.
data::TaskData load_task_data(const std::string& arg) {
  if (arg.rfind("synth:", 0) == 0)
    return data::gen_task(data::parse_task_spec(arg.substr(6)));
  std::string dir = arg;
  if (dir.empty()) {
    const char* env = std::getenv("MTZ_DATA_DIR");
    if (!env) throw Error("no dataset given and MTZ_DATA_DIR unset");
    dir = env;
  }
  data::TaskData td;
  td.train = data::load_idx(dir + "/train-images-idx3-ubyte",
                            dir + "/train-labels-idx1-ubyte");
  td.test = data::load_idx(dir + "/t10k-images-idx3-ubyte",
                           dir + "/t10k-labels-idx1-ubyte");
  return td;
}

// Architectures: mlp-<h1>-<h2>-...  cnn-<c1>-<c2>-<fc>  resmlp-<width>x<blocks>
Network build_arch(const std::string& arch, int input_dim, int classes,
                   uint64_t seed, const std::string& task_id) {
  auto nums = [](const std::string& s, char sep) {
    std::vector<int> v;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, sep)) v.push_back(std::stoi(tok));
    return v;
  };
  if (arch.rfind("mlp-", 0) == 0)
    return trainer::make_mlp(input_dim, nums(arch.substr(4), '-'), classes,
                             seed, task_id);
  if (arch.rfind("cnn-", 0) == 0) {
    const auto v = nums(arch.substr(4), '-');
    if (v.size() != 3) throw Error("cnn arch wants cnn-<c1>-<c2>-<fc>");
    const int side = static_cast<int>(std::lround(std::sqrt(double(input_dim))));
    if (side * side != input_dim)
      throw Error("cnn arch needs a square input dimension");
    return trainer::make_cnn(side, v[0], v[1], v[2], classes, seed, task_id);
  }
  if (arch.rfind("resmlp-", 0) == 0) {
    const auto v = nums(arch.substr(7), 'x');
    if (v.size() != 2) throw Error("resmlp arch wants resmlp-<width>x<blocks>");
    return trainer::make_residual_mlp(input_dim, v[0], v[1], classes, seed,
                                      task_id);
  }
  throw Error("unknown architecture: " + arch);
}

// --share full | none | 12,8 | t:0.5,0.5
void parse_share(const std::string& share, int n_layers,
                 zipper::MergePlan& plan) {
  plan.layers.clear();
  if (share == "full") return;
  plan.layers.resize(n_layers);
  if (share == "none") {
    for (auto& t : plan.layers) t.share_count = 0;
    return;
  }
  const bool thresholds = share.rfind("t:", 0) == 0;
  std::stringstream ss(thresholds ? share.substr(2) : share);
  std::string tok;
  size_t i = 0;
  while (std::getline(ss, tok, ',')) {
    if (i >= plan.layers.size()) throw Error("--share: too many entries");
    if (thresholds)
      plan.layers[i].threshold = std::stod(tok);
    else
      plan.layers[i].share_count = std::stoi(tok);
    ++i;
  }
  if (i != plan.layers.size())
    throw Error("--share: need one entry per hidden layer");
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> v;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) v.push_back(std::stoi(tok));
  return v;
}

int cmd_train(const std::string& arch, const std::string& data_arg,
              const std::string& out, uint64_t seed, double lr, int batch,
              int iterations, int classes, int log_every) {
  data::TaskData td = load_task_data(data_arg);
  if (classes <= 0) classes = td.train.num_classes;
  Network net = build_arch(arch, td.train.dim(), classes, seed,
                           arch + "-seed" + std::to_string(seed));
  trainer::TrainConfig cfg;
  cfg.learning_rate = lr;
  cfg.batch_size = batch;
  cfg.iterations = iterations;
  cfg.seed = seed;
  cfg.log_every = log_every;
  cfg.eval_data = &td.test;
  trainer::train(net, td.train, cfg);
  if (!out.empty()) save_model(net, out);
  std::cout << "final_test_error=" << data::evaluate(net, td.test) << "\n";
  return 0;
}

int cmd_zip(const std::vector<std::string>& model_paths,
            const std::vector<std::string>& data_args, const std::string& out,
            const std::string& report_path, const std::string& share,
            double alpha, const std::string& retrain_sched, double retrain_lr,
            int retrain_batch, const std::string& matching, int calib,
            uint64_t seed) {
  if (model_paths.size() < 2) throw Error("zip: need at least two --model");
  if (data_args.size() != model_paths.size())
    throw Error("zip: need one --data per --model");
  std::vector<Network> nets;
  for (const auto& p : model_paths) nets.push_back(load_network(p));
  std::vector<data::TaskData> td;
  for (const auto& a : data_args) td.push_back(load_task_data(a));

  zipper::MergePlan plan;
  plan.alpha = alpha;
  const int n_hidden = nets[0].num_layers() - 1;
  parse_share(share, n_hidden, plan);
  if (!retrain_sched.empty()) plan.retrain.per_layer = parse_ints(retrain_sched);
  plan.retrain_cfg.learning_rate = retrain_lr;
  plan.retrain_cfg.batch_size = retrain_batch;
  plan.retrain_cfg.seed = seed;
  plan.calib_samples = calib;
  plan.matching = matching == "exhaustive" ? zipper::MergePlan::Matching::kExhaustive
                                           : zipper::MergePlan::Matching::kGreedy;

  std::vector<zipper::ZipTask> tasks;
  for (size_t i = 0; i < nets.size(); ++i)
    tasks.push_back({&nets[i], &td[i].train, &td[i].test});
  zipper::ZipResult res = zipper::zip_models(tasks, plan);
  if (!out.empty()) save_model(res.model, out);
  res.report.write(std::cout);
  if (!report_path.empty()) {
    std::ofstream f(report_path);
    if (!f) throw IoError("cannot write report: " + report_path);
    res.report.write(f);
  }
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_arg,
             const std::string& task) {
  AnyModel m = load_model(model_path);
  data::TaskData td = load_task_data(data_arg);
  if (std::holds_alternative<Network>(m)) {
    std::cout << "error=" << data::evaluate(std::get<Network>(m), td.test)
              << "\n";
  } else {
    const ZippedModel& zm = std::get<ZippedModel>(m);
    const int t = task.empty() ? 0 : zm.task_index(task);
    std::cout << "task=" << zm.task_ids[t]
              << " error=" << data::evaluate(zm, t, td.test) << "\n";
  }
  return 0;
}

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv: return "conv";
    case LayerKind::kResidualEntry: return "residual-entry";
    case LayerKind::kResidualExit: return "residual-exit";
  }
  return "?";
}

double mask_density(const std::optional<Mat>& mask, int64_t size) {
  if (!mask || size == 0) return 1.0;
  return mask->sum() / static_cast<double>(size);
}

int cmd_inspect(const std::string& model_path) {
  AnyModel m = load_model(model_path);
  if (std::holds_alternative<Network>(m)) {
    const Network& net = std::get<Network>(m);
    std::cout << "type=network task=" << net.task_id
              << " input_dim=" << net.input_dim
              << " layers=" << net.num_layers()
              << " params=" << net.param_count() << "\n";
    for (int l = 0; l < net.num_layers(); ++l) {
      const Layer& ly = net.layers[l];
      std::cout << "layer=" << l << " kind=" << kind_name(ly.kind)
                << " in=" << ly.in_dim() << " out=" << ly.out_dim()
                << " weights=" << ly.weights.rows() << "x" << ly.weights.cols()
                << " mask_density="
                << mask_density(ly.mask, ly.weights.size()) << "\n";
    }
    return 0;
  }
  const ZippedModel& zm = std::get<ZippedModel>(m);
  std::cout << "type=zipped tasks=" << zm.num_tasks()
            << " input_dim=" << zm.input_dim << " params=" << zm.param_count()
            << "\n";
  for (int t = 0; t < zm.num_tasks(); ++t)
    std::cout << "task=" << t << " id=" << zm.task_ids[t]
              << " input_dim=" << zm.task_input_dims[t] << "\n";
  const TaskSet full = all_tasks(zm.num_tasks());
  for (size_t l = 0; l < zm.hidden.size(); ++l) {
    const SharedLayer& sl = zm.hidden[l];
    int shared = 0;
    for (TaskSet s : sl.units)
      if ((s & full) == full) ++shared;
    std::cout << "layer=" << l << " kind=" << kind_name(sl.kind)
              << " units=" << sl.n_units() << " in_units=" << sl.n_in_units()
              << " in_mult=" << sl.in_mult << " shared=" << shared
              << " shared_frac="
              << (sl.n_units() ? double(shared) / sl.n_units() : 0.0)
              << " mask_density=" << mask_density(sl.mask, sl.weights.size())
              << "\n";
  }
  for (int t = 0; t < zm.num_tasks(); ++t) {
    const Layer& h = zm.heads[t];
    std::cout << "head=" << t << " in=" << h.in_dim() << " out=" << h.out_dim()
              << " mask_density=" << mask_density(h.mask, h.weights.size())
              << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task zipping of pre-trained networks"};
  app.require_subcommand(1);
  app.set_config("--config");

  // train
  auto* train = app.add_subcommand("train", "Train one single-task model");
  std::string arch = "mlp-300-100", data_arg, out_path;
  uint64_t seed = 1;
  double lr = 0.1;
  int batch = 64, iterations = 10000, classes = 0, log_every = 0;
  train->add_option("--arch", arch, "mlp-h1-h2... | cnn-c1-c2-fc | resmlp-WxB");
  train->add_option("--data", data_arg, "IDX directory or synth:<spec>")
      ->required();
  train->add_option("--out", out_path, "model output path");
  train->add_option("--seed", seed);
  train->add_option("--lr", lr);
  train->add_option("--batch", batch);
  train->add_option("--iterations", iterations);
  train->add_option("--classes", classes);
  train->add_option("--log-every", log_every);

  // zip
  auto* zip = app.add_subcommand("zip", "Zip two or more trained models");
  std::vector<std::string> models, datas;
  std::string zip_out, report_path, share = "full", retrain_sched,
              matching = "greedy", eval_task;
  double alpha = 0.5, retrain_lr = 0.05;
  int retrain_batch = 64, calib = 2000;
  zip->add_option("--model", models, "model files (two or more)")->required();
  zip->add_option("--data", datas, "one dataset per model")->required();
  zip->add_option("--out", zip_out, "zipped model output path");
  zip->add_option("--report", report_path, "report output path");
  zip->add_option("--share", share, "full | none | n1,n2,... | t:e1,e2,...");
  zip->add_option("--alpha", alpha);
  zip->add_option("--retrain-schedule", retrain_sched,
                  "iterations per zipped layer, comma separated");
  zip->add_option("--retrain-lr", retrain_lr);
  zip->add_option("--retrain-batch", retrain_batch);
  zip->add_option("--matching", matching, "greedy | exhaustive");
  zip->add_option("--calib", calib, "calibration samples per task");
  zip->add_option("--seed", seed);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a model on a dataset");
  std::string eval_model, eval_data;
  eval->add_option("--model", eval_model)->required();
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--task", eval_task, "task id (zipped models)");

  // inspect
  auto* inspect = app.add_subcommand("inspect", "Dump model structure");
  std::string inspect_model;
  inspect->add_option("--model", inspect_model)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train)
      return cmd_train(arch, data_arg, out_path, seed, lr, batch, iterations,
                       classes, log_every);
    if (*zip)
      return cmd_zip(models, datas, zip_out, report_path, share, alpha,
                     retrain_sched, retrain_lr, retrain_batch, matching, calib,
                     seed);
    if (*eval) return cmd_eval(eval_model, eval_data, eval_task);
    if (*inspect) return cmd_inspect(inspect_model);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
