// latentaug command-line front end.

#include "latentaug/latentaug.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace la = latentaug;
namespace fs = std::filesystem;

namespace {

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

void warn_if_unnormalized(const la::EmbeddingDataset& ds, const std::string& what) {
  if (ds.normalized) return;
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    if (std::abs(ds.row(i).norm() - 1.0) > 1e-4) {
      warn(what + " is not l2-normalized; pass --normalize to normalize it first");
      return;
    }
}

la::EmbeddingDataset load(const std::string& path, bool normalize, const std::string& what) {
  auto ds = la::load_embeddings_auto(path);
  if (normalize) return la::l2_normalize(ds);
  warn_if_unnormalized(ds, what);
  return ds;
}

void print_report(const la::AggregateReport& r) {
  for (const auto& row : r.rows) {
    std::cout << row.method << " [" << row.setting << ", " << row.num_tasks << " tasks]";
    for (std::size_t i = 0; i < row.names.size(); ++i)
      std::cout << "  " << row.names[i] << " " << la::fmt6(row.values[i].mean) << " +- "
                << la::fmt6(row.values[i].ci95);
    std::cout << '\n';
  }
}

/// Flags shared by eval and sweep. Each one only overrides the config when
/// it was given on the command line.
struct Overrides {
  std::string method, cov_type, classifier, mode, selection;
  int prototypes = 0, aug_count = 0, tasks = 0, k_shot = 0, q_query = 0, n_way = 0;
  std::uint64_t seed = 0, kmeans_seed = 0;
  bool baseline = false, no_normalize = false, supervised = false, write_tasks = false;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app) {
    auto reg = [&](CLI::Option* o) { opts.push_back(o); };
    reg(app->add_option("--method", method, "augmentation method: none, la, dc"));
    reg(app->add_option("--cov-type", cov_type, "full, tied, diag, spherical or none"));
    reg(app->add_option("--prototypes", prototypes, "dictionary size C"));
    reg(app->add_option("--aug-count", aug_count, "outputs per support embedding, original included"));
    reg(app->add_option("--classifier", classifier, "centroid, logistic or ridge"));
    reg(app->add_option("--tasks", tasks, "number of meta-tasks"));
    reg(app->add_option("--k-shot", k_shot, "support samples per class"));
    reg(app->add_option("--q-query", q_query, "query samples per class"));
    reg(app->add_option("--n-way", n_way, "classes per FSL task"));
    reg(app->add_option("--mode", mode, "fsl or gfsl"));
    reg(app->add_option("--selection", selection, "uniform, hetero or homo"));
    reg(app->add_option("--seed", seed, "master seed for task sampling and augmentation"));
    reg(app->add_option("--kmeans-seed", kmeans_seed, "K-Means seed"));
    reg(app->add_flag("--baseline", baseline, "also score the no-augmentation baseline"));
    reg(app->add_flag("--supervised", supervised, "build the dictionary from class labels"));
    reg(app->add_flag("--no-normalize", no_normalize, "skip l2 normalization"));
    reg(app->add_flag("--write-tasks", write_tasks, "write tasks.jsonl next to the report"));
  }

  bool given(const char* name) const {
    for (auto* o : opts)
      if (o->check_lname(std::string(name).substr(2))) return o->count() > 0;
    return false;
  }

  void apply(la::ExperimentConfig& c) const {
    if (given("--method")) c.augmentation.method = la::parse_augment_method(method);
    if (given("--cov-type")) c.dictionary.cov_type = la::parse_covariance_type(cov_type);
    if (given("--prototypes")) c.dictionary.prototypes = prototypes;
    if (given("--aug-count")) c.augmentation.count = aug_count;
    if (given("--classifier")) c.classifier.kind = classifier;
    if (given("--tasks")) c.protocol.num_tasks = tasks;
    if (given("--k-shot")) c.protocol.k_shot = k_shot;
    if (given("--q-query")) c.protocol.q_query = q_query;
    if (given("--n-way")) c.protocol.n_way = n_way;
    if (given("--mode")) c.protocol.mode = la::parse_task_mode(mode);
    if (given("--selection")) c.protocol.selection = la::parse_shot_selection(selection);
    if (given("--seed")) c.master_seed = seed;
    if (given("--kmeans-seed")) c.dictionary.kmeans_seed = kmeans_seed;
    if (given("--baseline")) c.baseline = baseline;
    if (given("--supervised")) c.dictionary.supervised = supervised;
    if (given("--no-normalize")) c.normalize = !no_normalize;
    if (given("--write-tasks")) c.output.write_tasks = write_tasks;
  }
};

la::ExperimentConfig config_with_overrides(const std::string& path, const Overrides& o) {
  la::ExperimentConfig c = path.empty() ? la::ExperimentConfig{} : la::load_config(path);
  o.apply(c);
  la::validate_config(c);
  return c;
}

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent augmentation toolkit for few-shot classification of embeddings"};
  app.set_version_flag("--version", std::string(la::kVersion));
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic base/novel embedding pair");
  la::SyntheticSpec spec;
  std::string synth_config, synth_out = ".";
  bool synth_csv = false;
  synth->add_option("--config", synth_config, "JSON file with a synthetic spec (or a full experiment config)");
  auto* o_dim = synth->add_option("--dim", spec.dim);
  auto* o_base = synth->add_option("--base-classes", spec.base_classes);
  auto* o_novel = synth->add_option("--novel-classes", spec.novel_classes);
  auto* o_cpc = synth->add_option("--clusters-per-class", spec.clusters_per_class);
  auto* o_spc = synth->add_option("--samples-per-class", spec.samples_per_class);
  auto* o_cs = synth->add_option("--covariance-scale", spec.covariance_scale);
  auto* o_wsi = synth->add_option("--wsi-count", spec.wsi_count);
  auto* o_seed = synth->add_option("--seed", spec.seed);
  auto* o_shared = synth->add_option("--shared-variation", spec.shared_variation, "true or false");
  synth->add_option("--out", synth_out, "output directory")->capture_default_str();
  synth->add_flag("--csv", synth_csv, "also write CSV copies");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "fit K-Means prototypes to an embedding file");
  std::string cl_input, cl_out;
  la::KMeansOptions km;
  bool cl_normalize = false;
  cluster->add_option("--input", cl_input)->required();
  cluster->add_option("--out", cl_out, "output stem (writes <stem>.emb and <stem>.json)")->required();
  cluster->add_option("--prototypes,-C", km.clusters)->capture_default_str();
  cluster->add_option("--seed", km.seed)->capture_default_str();
  cluster->add_option("--max-iters", km.max_iters)->capture_default_str();
  cluster->add_option("--tol", km.tol)->capture_default_str();
  cluster->add_flag("--normalize", cl_normalize, "l2-normalize the input first");

  // dict
  auto* dict = app.add_subcommand("dict", "build a base dictionary");
  std::string d_input, d_out, d_clusters, d_cov = "full";
  double d_eps = 1e-6;
  bool d_supervised = false, d_normalize = false;
  la::KMeansOptions d_km;
  dict->add_option("--input", d_input)->required();
  dict->add_option("--out", d_out, "output stem")->required();
  dict->add_option("--clusters", d_clusters, "stem written by `cluster`; fits K-Means when omitted");
  dict->add_option("--cov-type", d_cov)->capture_default_str();
  dict->add_option("--ridge-eps", d_eps)->capture_default_str();
  dict->add_option("--prototypes,-C", d_km.clusters)->capture_default_str();
  dict->add_option("--seed", d_km.seed)->capture_default_str();
  dict->add_flag("--supervised", d_supervised, "one entry per class");
  dict->add_flag("--normalize", d_normalize, "l2-normalize the input first");

  // eval
  auto* eval = app.add_subcommand("eval", "run an experiment from a config or manifest");
  std::string ev_config, ev_out;
  Overrides ev_over;
  eval->add_option("--config", ev_config, "experiment config or manifest.json");
  eval->add_option("--out", ev_out, "output directory (default: output.dir from the config)");
  ev_over.add(eval);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "ablation sweep over one axis on a shared task series");
  std::string sw_config, sw_out, sw_axis, sw_values;
  Overrides sw_over;
  sweep->add_option("--config", sw_config);
  sweep->add_option("--axis", sw_axis, "prototypes, cov_type, aug_count or seed")->required();
  sweep->add_option("--values", sw_values, "comma-separated values")->required();
  sweep->add_option("--out", sw_out, "output directory");
  sw_over.add(sweep);

  // validate
  auto* validate = app.add_subcommand("validate", "lint a dataset and optionally a task file");
  std::string v_input, v_tasks, v_config;
  validate->add_option("--input", v_input)->required();
  validate->add_option("--tasks", v_tasks, "tasks.jsonl to check against the dataset");
  validate->add_option("--config", v_config, "config whose protocol the tasks must satisfy");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      if (!synth_config.empty()) {
        std::ifstream in(synth_config);
        if (!in) throw la::Error("config", "cannot open " + synth_config);
        const auto j = la::Json::parse(in);
        const la::SyntheticSpec defaults = spec;
        la::SyntheticSpec from_file;
        if (j.contains("data") || j.contains("config"))
          from_file = la::config_from_json(j).data.synthetic;
        else
          from_file = la::synthetic_from_json(j);
        // Flags win over the file.
        auto pick = [](CLI::Option* o, auto flag_value, auto file_value) { return o->count() ? flag_value : file_value; };
        spec = from_file;
        spec.dim = pick(o_dim, defaults.dim, from_file.dim);
        spec.base_classes = pick(o_base, defaults.base_classes, from_file.base_classes);
        spec.novel_classes = pick(o_novel, defaults.novel_classes, from_file.novel_classes);
        spec.clusters_per_class = pick(o_cpc, defaults.clusters_per_class, from_file.clusters_per_class);
        spec.samples_per_class = pick(o_spc, defaults.samples_per_class, from_file.samples_per_class);
        spec.covariance_scale = pick(o_cs, defaults.covariance_scale, from_file.covariance_scale);
        spec.wsi_count = pick(o_wsi, defaults.wsi_count, from_file.wsi_count);
        spec.seed = pick(o_seed, defaults.seed, from_file.seed);
        spec.shared_variation = pick(o_shared, defaults.shared_variation, from_file.shared_variation);
      }
      const auto data = la::generate_synthetic(spec);
      const fs::path dir(synth_out);
      fs::create_directories(dir);
      la::save_embeddings(data.base, (dir / "base.emb").string());
      la::save_embeddings(data.novel, (dir / "novel.emb").string());
      la::save_embeddings(la::concat(data.base, data.novel), (dir / "joint.emb").string());
      if (synth_csv) {
        la::save_embeddings_csv(data.base, (dir / "base.csv").string());
        la::save_embeddings_csv(data.novel, (dir / "novel.csv").string());
      }
      la::write_text(dir / "synthetic.json", la::synthetic_to_json(spec).dump(2) + "\n");
      std::cout << "base " << data.base.size() << " x " << data.base.dim() << ", novel " << data.novel.size()
                << " x " << data.novel.dim() << " -> " << dir.string() << '\n';
    } else if (*cluster) {
      const auto ds = load(cl_input, cl_normalize, cl_input);
      const auto m = la::kmeans_fit(ds, km);
      la::save_cluster_model(m, cl_out);
      std::cout << "C " << m.clusters() << "  iterations " << m.iterations_run << "  inertia " << la::fmt6(m.inertia)
                << '\n';
    } else if (*dict) {
      const auto ds = load(d_input, d_normalize, d_input);
      const auto type = la::parse_covariance_type(d_cov);
      la::BaseDictionary b;
      if (d_supervised) {
        b = la::build_supervised_dictionary(ds, type, d_eps);
      } else if (!d_clusters.empty()) {
        const auto m = la::load_cluster_model(d_clusters);
        b = la::build_dictionary(ds, m.assignments, m.clusters(), type, d_eps);
      } else {
        const auto m = la::kmeans_fit(ds, d_km);
        b = la::build_dictionary(ds, m.assignments, m.clusters(), type, d_eps);
      }
      la::save_dictionary(b, d_out);
      std::cout << "dictionary C " << b.size() << "  cov_type " << la::to_string(type) << "  dim " << b.dim << '\n';
    } else if (*eval) {
      auto c = config_with_overrides(ev_config, ev_over);
      if (!ev_out.empty()) c.output.dir = ev_out;
      const auto r = la::run_experiment(c);
      la::write_experiment_outputs(r, c, c.output.dir);
      print_report(r.report);
      std::cout << "config " << r.report.config_hash << " -> " << c.output.dir << '\n';
    } else if (*sweep) {
      auto c = config_with_overrides(sw_config, sw_over);
      if (!sw_out.empty()) c.output.dir = sw_out;
      const auto axis = la::parse_sweep_axis(sw_axis);
      const auto values = split_values(sw_values);
      const auto s = la::run_ablation_sweep(c, axis, values);
      const fs::path dir(c.output.dir);
      fs::create_directories(dir);
      la::write_text(dir / "sweep.csv", la::sweep_to_csv(s));
      la::write_text(dir / "manifest.json", la::manifest_json(c).dump(2) + "\n");
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto& row = s.rows[i];
        std::cout << la::to_string(axis) << "=" << values[i];
        for (std::size_t m = 0; m < row.names.size(); ++m)
          std::cout << "  " << row.names[m] << " " << la::fmt6(row.values[m].mean);
        std::cout << '\n';
      }
      if (s.baseline) {
        std::cout << "baseline";
        for (std::size_t m = 0; m < s.baseline->names.size(); ++m)
          std::cout << "  " << s.baseline->names[m] << " " << la::fmt6(s.baseline->values[m].mean);
        std::cout << '\n';
      }
      if (values.size() > 1) {
        const auto& last = s.rows.front().names.back();
        double lo = 1e300, hi = -1e300;
        for (const auto& row : s.rows) lo = std::min(lo, row.at(last).mean), hi = std::max(hi, row.at(last).mean);
        std::cout << last << " spread " << la::fmt6(hi - lo) << '\n';
      }
    } else if (*validate) {
      const auto ds = la::load_embeddings_auto(v_input);
      int problems = 0;
      std::cout << v_input << ": " << ds.size() << " x " << ds.dim() << ", labels "
                << (ds.labels ? "yes" : "no") << ", wsi " << (ds.wsi_ids ? "yes" : "no") << '\n';
      for (Eigen::Index i = 0; i < ds.size(); ++i)
        if (ds.row(i).norm() == 0.0) {
          std::cout << "zero-norm row " << i << '\n';
          ++problems;
        }
      warn_if_unnormalized(ds, v_input);
      if (ds.labels) {
        std::map<la::ClassId, int> counts;
        for (auto c : *ds.labels) ++counts[c];
        for (auto& [c, n] : counts) std::cout << "class " << c << ": " << n << " samples\n";
      }
      if (!v_tasks.empty()) {
        la::TaskProtocol proto;
        if (!v_config.empty()) {
          const auto c = la::load_config(v_config);
          proto.mode = c.protocol.mode;
          proto.n_way = c.protocol.n_way;
          proto.k_shot = c.protocol.k_shot;
          proto.q_query = c.protocol.q_query;
          proto.selection = c.protocol.selection;
          if (c.protocol.support_wsis) proto.support_pool.emplace(c.protocol.support_wsis->begin(), c.protocol.support_wsis->end());
          if (c.protocol.query_wsis) proto.query_pool.emplace(c.protocol.query_wsis->begin(), c.protocol.query_wsis->end());
          if (c.protocol.mode == la::TaskMode::FSL && c.protocol.novel_classes) proto.eligible_classes = c.protocol.novel_classes;
        }
        const auto tasks = la::read_tasks_jsonl(v_tasks);
        for (const auto& t : tasks)
          for (const auto& v : la::validate_task(t, ds, proto)) {
            std::cout << "task " << t.task_index << ": " << v << '\n';
            ++problems;
          }
        std::cout << tasks.size() << " tasks checked\n";
      }
      std::cout << problems << " problem(s)\n";
      return problems == 0 ? 0 : 1;
    }
  } catch (const la::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
