#include "patchscope/common.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

namespace patchscope {

namespace {

thread_local bool t_inside_worker = false;

// One parallel job: a chunk function plus its claim/completion counters.
// Workers hold a shared_ptr snapshot, so a worker that wakes late (or gets
// scheduled out mid-job on a busy machine) can only drain its own,
// already-exhausted job; it can never claim chunks of a newer job through
// stale state.
struct Job {
  std::function<void(std::int64_t)> fn;
  std::int64_t total = 0;
  std::atomic<std::int64_t> next{0};
  std::atomic<std::int64_t> pending{0};
};

class Pool {
 public:
  static Pool& instance() {
    static Pool pool;
    return pool;
  }

  std::size_t size() {
    std::lock_guard lk(control_);
    return workers_.size() + 1;  // workers plus the calling thread
  }

  void resize(std::size_t n) {
    n = std::max<std::size_t>(1, n);
    std::lock_guard lk(control_);
    stop_workers();
    start_workers(n - 1);
  }

  void run(std::int64_t n_chunks,
           const std::function<void(std::int64_t)>& chunk_fn) {
    std::lock_guard lk(control_);
    if (workers_.empty() || n_chunks <= 1) {
      for (std::int64_t i = 0; i < n_chunks; ++i) chunk_fn(i);
      return;
    }
    auto job = std::make_shared<Job>();
    job->fn = chunk_fn;
    job->total = n_chunks;
    job->pending.store(n_chunks, std::memory_order_relaxed);
    {
      std::lock_guard jk(job_mutex_);
      current_job_ = job;
      ++generation_;
    }
    job_cv_.notify_all();
    execute(*job);  // the calling thread participates
    {
      std::unique_lock dk(job_mutex_);
      done_cv_.wait(dk, [&] { return job->pending.load() == 0; });
      current_job_.reset();
    }
  }

 private:
  Pool() {
    std::size_t n = 0;
    if (const char* env = std::getenv("PATCHSCOPE_THREADS")) {
      n = static_cast<std::size_t>(std::strtoul(env, nullptr, 10));
    }
    if (n == 0) {
      n = std::min<std::size_t>(std::thread::hardware_concurrency(), 16);
      if (n == 0) n = 1;
    }
    start_workers(n - 1);
  }

  ~Pool() {
    std::lock_guard lk(control_);
    stop_workers();
  }

  void start_workers(std::size_t n) {
    quit_ = false;
    for (std::size_t i = 0; i < n; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void stop_workers() {
    {
      std::lock_guard jk(job_mutex_);
      quit_ = true;
      ++generation_;
    }
    job_cv_.notify_all();
    for (auto& t : workers_) t.join();
    workers_.clear();
    quit_ = false;
  }

  void worker_loop() {
    t_inside_worker = true;
    std::uint64_t seen = 0;
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock lk(job_mutex_);
        job_cv_.wait(lk, [&] { return quit_ || generation_ != seen; });
        seen = generation_;
        if (quit_) return;
        job = current_job_;
      }
      if (job) execute(*job);
    }
  }

  void execute(Job& job) {
    for (;;) {
      const std::int64_t c = job.next.fetch_add(1, std::memory_order_relaxed);
      if (c >= job.total) break;
      job.fn(c);
      if (job.pending.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard lk(job_mutex_);
        done_cv_.notify_all();
      }
    }
  }

  std::mutex control_;
  std::mutex job_mutex_;
  std::condition_variable job_cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> workers_;
  std::shared_ptr<Job> current_job_;
  std::uint64_t generation_ = 0;
  bool quit_ = false;
};

}  // namespace

std::size_t thread_count() { return Pool::instance().size(); }

void set_thread_count(std::size_t n) { Pool::instance().resize(n); }

void parallel_for(std::int64_t n,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (n <= 0) return;
  // Nested parallel regions run serially; ops only parallelize at top level.
  if (t_inside_worker) {
    body(0, n);
    return;
  }
  const std::int64_t threads =
      static_cast<std::int64_t>(Pool::instance().size());
  if (threads <= 1 || n == 1) {
    body(0, n);
    return;
  }
  const std::int64_t chunks = std::min<std::int64_t>(n, threads * 4);
  const std::int64_t per = (n + chunks - 1) / chunks;
  std::function<void(std::int64_t)> chunk_fn = [&](std::int64_t c) {
    const std::int64_t b = c * per;
    const std::int64_t e = std::min<std::int64_t>(n, b + per);
    if (b < e) body(b, e);
  };
  Pool::instance().run(chunks, chunk_fn);
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t s = base ^ (0x9e3779b97f4a7c15ull + stream * 0xbf58476d1ce4e5b9ull);
  splitmix64(s);
  return splitmix64(s);
}

Rng::Rng(std::uint64_t seed) {
  std::uint64_t s = seed;
  for (auto& w : s_) w = splitmix64(s);
}

static inline std::uint64_t rotl64(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl64(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl64(s_[3], 45);
  return result;
}

double Rng::next_unit() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_normal() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  double u1 = 0.0;
  do {
    u1 = next_unit();
  } while (u1 <= 0.0);
  const double u2 = next_unit();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  cached_ = r * std::sin(a);
  have_cached_ = true;
  return r * std::cos(a);
}

std::int64_t Rng::next_index(std::int64_t n) {
  if (n <= 0) throw ConfigError("Rng::next_index: n must be positive");
  const std::uint64_t un = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<std::int64_t>(v % un);
}

void shuffle_indices(std::vector<std::int64_t>& idx, Rng& rng) {
  for (std::int64_t i = static_cast<std::int64_t>(idx.size()) - 1; i > 0; --i) {
    const std::int64_t j = rng.next_index(i + 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  out << text;
  if (!out) throw IoError("short write: " + path);
}

}  // namespace patchscope
