#include "support.hpp"

#include <atomic>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace pixeldino::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("pixeldino_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

Tensor tensor(Shape shape, std::vector<float> values, bool requires_grad) {
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }
std::vector<float> grad_values(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

SyntheticConfig tiny_synthetic(uint64_t seed) {
  SyntheticConfig c;
  c.seed = seed;
  c.tile_size = 48;
  c.labelled_tiles = 4;
  c.unlabelled_tiles = 6;
  c.eval_tiles = 2;
  c.eval_in_tiles = 2;
  c.target_area_max = 200;
  c.target_density = 0.03;
  c.noise_scale = 16.0;
  return c;
}

GeneratedStores generate_tiny(const fs::path& dir, uint64_t seed) { return generate_synthetic(tiny_synthetic(seed), dir); }

std::string tiny_run_json(const fs::path& data_root, const std::string& method, int64_t steps, const std::string& extra) {
  std::ostringstream os;
  os << "{\n  \"method\": \"" << method << "\",\n  \"seed\": 5,\n  \"steps\": " << steps
     << ",\n  \"eval_interval\": 4,\n  \"log_interval\": 2,\n"
     << "  \"model\": {\"base_width\": 4, \"depth\": 2, \"norm_groups\": 2},\n"
     << "  \"data\": {\"root\": \"" << data_root.string()
     << "\", \"eval\": [\"eval\", \"eval_in\"], \"patch_size\": 16, \"batch_size_labelled\": 2, "
        "\"batch_size_unlabelled\": 2, \"eval_batch_size\": 4}"
     << extra << "\n}\n";
  return os.str();
}

RunConfig tiny_run(const fs::path& data_root, const std::string& method, int64_t steps, const std::string& extra) {
  return parse_run_config(tiny_run_json(data_root, method, steps, extra));
}

TrainOptions options(const fs::path& out_dir, bool resume, int64_t halt_after) {
  TrainOptions o;
  o.out_dir = out_dir;
  o.resume = resume;
  o.halt_after = halt_after;
  return o;
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
}

}  // namespace pixeldino::testing
