// Training CLI: runs the pipelined GNN trainer on a bsnap dataset directory
// or a synthetic SBM benchmark, on the deterministic virtual-time simulator,
// optionally routing tensor tasks through a TCP worker.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <thread>

#include "gnnpipe/engine.hpp"
#include "gnnpipe/io.hpp"
#include "gnnpipe/report.hpp"
#include "gnnpipe/transport.hpp"

using namespace gnnpipe;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitIo = 2;

struct SynthSpec {
  uint32_t communities = 0;
  uint32_t per_community = 0;
  double p_in = 0.1;
  double p_out = 0.005;
};

// "sbm:4x100" or "sbm:4x100:0.1:0.005"
SynthSpec parse_synth(const std::string& spec) {
  SynthSpec out;
  if (spec.rfind("sbm:", 0) != 0) throw std::invalid_argument("--synth expects sbm:CxN[:p_in:p_out]");
  std::string rest = spec.substr(4);
  const size_t x = rest.find('x');
  if (x == std::string::npos) throw std::invalid_argument("--synth expects sbm:CxN[:p_in:p_out]");
  out.communities = static_cast<uint32_t>(std::stoul(rest.substr(0, x)));
  size_t colon = rest.find(':', x);
  out.per_community = static_cast<uint32_t>(std::stoul(rest.substr(x + 1, colon - x - 1)));
  if (colon != std::string::npos) {
    const size_t colon2 = rest.find(':', colon + 1);
    if (colon2 == std::string::npos) throw std::invalid_argument("--synth expects both p_in and p_out");
    out.p_in = std::stod(rest.substr(colon + 1, colon2 - colon - 1));
    out.p_out = std::stod(rest.substr(colon2 + 1));
  }
  if (out.communities == 0 || out.per_community == 0)
    throw std::invalid_argument("--synth needs positive sizes");
  return out;
}

VertexId infer_vertices_from_features(const std::string& path) {
  auto bytes = bsnap::read_all(path);
  if (bytes.size() < 4) throw IoError("features.bsnap: missing header");
  const uint32_t num_feats = bsnap::u32_at(bytes, 0);
  if (num_feats == 0 || (bytes.size() - 4) % (4ull * num_feats) != 0)
    throw IoError("features.bsnap: body is not a whole number of feature rows");
  return static_cast<VertexId>((bytes.size() - 4) / (4ull * num_feats));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pipelined GNN training on graph servers with a simulated serverless fleet"};

  std::string dataset, synth, mode = "pipe", transport = "inproc", report_path, parts_file;
  uint32_t layers = 2, hidden = 16, staleness = 0, lambdas = 100, intervals = 4, partitions = 2;
  uint32_t num_ps = 2, max_epochs = 200;
  uint64_t seed = 1;
  double lr = 0.01, target_acc = -1.0;
  std::string optimizer = "adam";
  bool fuse = false, remat = false, stream = false, directed = false;
  uint16_t serve_worker_port = 0;
  bool serve_worker = false;

  app.add_option("--dataset", dataset, "dataset directory with graph/features/labels .bsnap files");
  app.add_option("--synth", synth, "synthetic benchmark, e.g. sbm:4x100 or sbm:4x100:0.1:0.005");
  app.add_option("--layers", layers, "number of GCN layers")->check(CLI::PositiveNumber);
  app.add_option("--hidden", hidden, "hidden layer width")->check(CLI::PositiveNumber);
  app.add_option("--mode", mode, "pipe | async")->check(CLI::IsMember({"pipe", "async"}));
  app.add_option("--s", staleness, "degree of staleness (async mode)");
  app.add_option("--l", lambdas, "max lambdas per graph server")->check(CLI::PositiveNumber);
  app.add_option("--lr", lr, "learning rate");
  app.add_option("--optimizer", optimizer, "sgd | adam")->check(CLI::IsMember({"sgd", "adam"}));
  app.add_option("--intervals", intervals, "vertex intervals per partition")->check(CLI::PositiveNumber);
  app.add_option("--partitions", partitions, "number of graph partitions")->check(CLI::PositiveNumber);
  app.add_option("--parts", parts_file, "partition assignment file (one id per line)");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--max-epochs", max_epochs, "epoch budget")->check(CLI::PositiveNumber);
  app.add_option("--target-acc", target_acc, "stop at this training accuracy");
  app.add_flag("--fuse", fuse, "fuse last-layer forward and backward apply into one task");
  app.add_flag("--remat", remat, "rematerialize pre-activations instead of stashing them");
  app.add_flag("--stream", stream, "overlap lambda input transfer with compute");
  app.add_flag("--directed", directed, "treat graph.bsnap pairs as directed edges");
  std::string dump_dir;
  app.add_option("--transport", transport, "inproc | tcp | tcp:HOST:PORT");
  app.add_option("--report", report_path, "write the JSON-lines training report here");
  app.add_option("--dump-dataset", dump_dir, "write the --synth dataset as .bsnap files and exit");
  app.add_flag("--serve-worker", serve_worker, "run a tensor worker server instead of training");
  app.add_option("--worker-port", serve_worker_port, "port for --serve-worker (0 = ephemeral)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (serve_worker) {
      TensorWorkerServer server(serve_worker_port);
      std::cout << "tensor worker listening on 127.0.0.1:" << server.port() << std::endl;
      while (true) std::this_thread::sleep_for(std::chrono::seconds(3600));
    }

    if (dataset.empty() == synth.empty()) {
      std::cerr << "error: exactly one of --dataset or --synth is required\n";
      return kExitConfig;
    }
    if (mode != "async" && staleness != 0) {
      std::cerr << "error: --s requires --mode async\n";
      return kExitConfig;
    }

    // assemble the dataset
    Graph graph;
    TrainingData data;
    std::optional<std::vector<uint32_t>> assignment;
    if (!synth.empty()) {
      SynthSpec spec = parse_synth(synth);
      auto ds = synth_sbm(spec.communities, spec.per_community, spec.p_in, spec.p_out, seed);
      if (!dump_dir.empty()) {
        namespace fs = std::filesystem;
        fs::create_directories(dump_dir);
        const fs::path dir(dump_dir);
        std::vector<Edge> pairs;  // undirected convention: each edge once
        for (const auto& [u, v] : ds.edges)
          if (u < v) pairs.emplace_back(u, v);
        write_graph_bsnap((dir / "graph.bsnap").string(), pairs);
        write_features_bsnap((dir / "features.bsnap").string(), ds.features);
        write_labels_bsnap((dir / "labels.bsnap").string(), ds.labels);
        std::cout << "wrote " << ds.num_vertices << " vertices, " << pairs.size()
                  << " undirected edges to " << dump_dir << std::endl;
        return kExitOk;
      }
      graph = build_graph(ds.edges, ds.num_vertices);
      data.features = std::move(ds.features);
      data.labels = std::move(ds.labels.values);
      data.num_classes = ds.labels.num_classes;
    } else {
      namespace fs = std::filesystem;
      const fs::path dir(dataset);
      const std::string features_path = (dir / "features.bsnap").string();
      const std::string graph_path = (dir / "graph.bsnap").string();
      const std::string labels_path = (dir / "labels.bsnap").string();
      const VertexId n = infer_vertices_from_features(features_path);
      data.features = load_features_bsnap(features_path, n);
      auto pairs = load_graph_bsnap(graph_path, n);
      graph = build_graph(directed ? pairs : expand_undirected(pairs), n);
      auto labels = load_labels_bsnap(labels_path, n);
      data.labels = std::move(labels.values);
      data.num_classes = labels.num_classes;
      const std::string default_parts = (dir / "graph.bsnap.parts").string();
      if (!parts_file.empty())
        assignment = load_partition_file(parts_file, n);
      else if (fs::exists(default_parts))
        assignment = load_partition_file(default_parts, n);
    }
    data.graph = &graph;

    EngineConfig cfg;
    cfg.mode = mode == "pipe" ? PipelineMode::pipe : PipelineMode::async;
    cfg.staleness = staleness;
    cfg.num_partitions = partitions;
    cfg.assignment = assignment;
    cfg.intervals_per_partition = intervals;
    cfg.num_ps = num_ps;
    cfg.hidden_widths.assign(layers - 1, hidden);
    cfg.optimizer = optimizer == "sgd" ? OptimizerKind::vanilla_sgd : OptimizerKind::adam;
    cfg.learning_rate = lr;
    cfg.seed = seed;
    cfg.fuse = fuse;
    cfg.remat = remat;
    cfg.stream = stream;
    cfg.fleet_max = lambdas;
    cfg.max_epochs = max_epochs;
    if (target_acc >= 0.0)
      cfg.target_accuracy = target_acc;
    else
      cfg.stop_on_convergence = true;  // train until the accuracy curve flattens

    if (assignment) {
      uint32_t max_part = 0;
      for (uint32_t a : *assignment) max_part = std::max(max_part, a + 1);
      cfg.num_partitions = max_part;
    }

    // transport selection
    std::unique_ptr<TensorWorkerServer> local_worker;
    std::unique_ptr<TensorWorkerClient> worker_client;
    std::unique_ptr<RemoteTensorExecutor> remote_exec;
    if (transport == "tcp") {
      local_worker = std::make_unique<TensorWorkerServer>();
      worker_client = std::make_unique<TensorWorkerClient>("127.0.0.1", local_worker->port());
    } else if (transport.rfind("tcp:", 0) == 0) {
      const std::string rest = transport.substr(4);
      const size_t colon = rest.rfind(':');
      if (colon == std::string::npos) throw std::invalid_argument("--transport tcp:HOST:PORT");
      worker_client = std::make_unique<TensorWorkerClient>(
          rest.substr(0, colon), static_cast<uint16_t>(std::stoul(rest.substr(colon + 1))));
    } else if (transport != "inproc") {
      throw std::invalid_argument("unknown transport " + transport);
    }
    if (worker_client) {
      remote_exec = std::make_unique<RemoteTensorExecutor>(*worker_client);
      cfg.executor = remote_exec.get();
    }

    Engine engine(data, cfg);
    TrainingResult result = engine.run();

    PriceTable prices;
    if (!report_path.empty()) {
      std::ofstream out(report_path, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot open report file " + report_path);
      write_report(out, result, prices);
    } else {
      write_report(std::cout, result, prices);
    }

    std::cerr << "epochs=" << result.epochs.size() << " accuracy=" << result.final_accuracy
              << " virtual_time_s=" << ns_to_seconds(result.total_ns)
              << (result.target_reached ? " (target reached)"
                                        : result.converged ? " (converged)" : "")
              << std::endl;
    return kExitOk;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << std::endl;
    return kExitIo;
  } catch (const TransportError& e) {
    std::cerr << "transport error: " << e.what() << std::endl;
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitConfig;
  }
}
