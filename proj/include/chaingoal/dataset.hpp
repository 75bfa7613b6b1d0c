#pragma once

// Offline trajectory datasets: generation by a scripted expert, and a
// little-endian binary container that round-trips bit-exactly.
//
// File layout: magic "CGD1" | u32 version=1 | u32 obs_dim | u32 act_dim |
// u32 n_traj | per trajectory { u32 T | (T+1)*obs_dim f32 states |
// T*act_dim f32 actions }. A JSON sidecar at <path>.json carries
// provenance: {maze, noise_sigma, seed, generator_version}.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chaingoal/common.hpp"
#include "chaingoal/maze.hpp"
#include "chaingoal/random.hpp"

namespace chaingoal {

struct Trajectory {
  std::size_t steps = 0;               // T
  std::vector<float> states;           // (T+1) * obs_dim
  std::vector<float> actions;          // T * act_dim
};

struct Dataset {
  std::uint32_t obs_dim = 2;
  std::uint32_t act_dim = 2;
  std::vector<Trajectory> trajectories;

  // Provenance (sidecar).
  std::string maze_name;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  int generator_version = 1;

  std::size_t total_transitions() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.steps;
    return n;
  }

  std::size_t total_states() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.steps + 1;
    return n;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw DataError(std::string("dataset file truncated reading ") + what + " at byte offset " +
                      std::to_string(pos));
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }

  float f32(const char* what) {
    std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

}  // namespace detail

inline std::string serialize_dataset(const Dataset& ds) {
  std::string out;
  out += "CGD1";
  detail::put_u32(out, 1);
  detail::put_u32(out, ds.obs_dim);
  detail::put_u32(out, ds.act_dim);
  detail::put_u32(out, static_cast<std::uint32_t>(ds.trajectories.size()));
  for (const auto& t : ds.trajectories) {
    if (t.states.size() != (t.steps + 1) * ds.obs_dim || t.actions.size() != t.steps * ds.act_dim)
      throw DataError("serialize_dataset: trajectory buffers inconsistent with T=" +
                      std::to_string(t.steps));
    detail::put_u32(out, static_cast<std::uint32_t>(t.steps));
    for (float v : t.states) detail::put_f32(out, v);
    for (float v : t.actions) detail::put_f32(out, v);
  }
  return out;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("save_dataset: cannot open " + path);
  std::string bytes = serialize_dataset(ds);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("save_dataset: write failed for " + path);

  nlohmann::json side;
  side["maze"] = ds.maze_name;
  side["noise_sigma"] = ds.noise_sigma;
  side["seed"] = ds.seed;
  side["generator_version"] = ds.generator_version;
  std::ofstream sf(path + ".json", std::ios::trunc);
  if (!sf) throw DataError("save_dataset: cannot open sidecar " + path + ".json");
  sf << side.dump(2) << "\n";
}

inline Dataset parse_dataset(const std::string& bytes) {
  Dataset ds;
  detail::ByteReader r{bytes};
  r.need(4, "magic");
  if (bytes.compare(0, 4, "CGD1") != 0)
    throw DataError("dataset file has bad magic at byte offset 0 (expected \"CGD1\")");
  r.pos = 4;
  std::uint32_t version = r.u32("version");
  if (version != 1)
    throw DataError("dataset file has unsupported version " + std::to_string(version) +
                    " at byte offset 4");
  ds.obs_dim = r.u32("obs_dim");
  ds.act_dim = r.u32("act_dim");
  std::uint32_t n_traj = r.u32("n_traj");
  ds.trajectories.reserve(n_traj);
  for (std::uint32_t i = 0; i < n_traj; ++i) {
    Trajectory t;
    t.steps = r.u32("trajectory length");
    t.states.resize((t.steps + 1) * ds.obs_dim);
    t.actions.resize(t.steps * ds.act_dim);
    for (auto& v : t.states) v = r.f32("state");
    for (auto& v : t.actions) v = r.f32("action");
    ds.trajectories.push_back(std::move(t));
  }
  if (r.pos != bytes.size())
    throw DataError("dataset file has " + std::to_string(bytes.size() - r.pos) +
                    " trailing bytes at byte offset " + std::to_string(r.pos));
  return ds;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("load_dataset: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Dataset ds = parse_dataset(bytes);

  std::ifstream sf(path + ".json");
  if (sf) {
    nlohmann::json side = nlohmann::json::parse(sf, nullptr, true);
    ds.maze_name = side.value("maze", std::string());
    ds.noise_sigma = side.value("noise_sigma", 0.0);
    ds.seed = side.value("seed", std::uint64_t{0});
    ds.generator_version = side.value("generator_version", 1);
  }
  return ds;
}

// ===== scripted expert =====

// One greedy-descent move on a BFS distance field: head for the center of
// the neighboring cell one step closer to the goal, or straight at the goal
// point from inside the goal cell. Proportional control with unit gain,
// clipped to the action bounds.
inline void expert_action(const MazeSpec& spec, const std::vector<int>& dist, double x, double y,
                          double gx, double gy, double& ax, double& ay) {
  long cx = spec.cell_x(x), cy = spec.cell_y(y);
  auto idx = static_cast<std::size_t>(cy) * spec.width + static_cast<std::size_t>(cx);
  int d = dist[idx];
  if (d < 0) throw DataError("expert_action: current cell is unreachable from the goal");
  double tx, ty;
  if (d == 0) {
    tx = gx;
    ty = gy;
  } else {
    const long dxs[4] = {-1, 1, 0, 0};
    const long dys[4] = {0, 0, -1, 1};
    tx = x;
    ty = y;
    for (int n = 0; n < 4; ++n) {
      long nx = cx + dxs[n], ny = cy + dys[n];
      if (spec.wall_at(nx, ny)) continue;
      auto nidx = static_cast<std::size_t>(ny) * spec.width + static_cast<std::size_t>(nx);
      if (dist[nidx] == d - 1) {
        tx = spec.cell_center_x(nx);
        ty = spec.cell_center_y(ny);
        break;
      }
    }
  }
  double b = spec.action_bound;
  ax = std::clamp(tx - x, -b, b);
  ay = std::clamp(ty - y, -b, b);
}

namespace detail {

inline void random_free_point(const MazeSpec& spec, Pcg64& rng, double& x, double& y) {
  for (int attempt = 0; attempt < 100000; ++attempt) {
    double px = rng.uniform(0.0, static_cast<double>(spec.width) * spec.cell_size);
    double py = rng.uniform(0.0, static_cast<double>(spec.height) * spec.cell_size);
    if (spec.free_at(px, py)) {
      x = px;
      y = py;
      return;
    }
  }
  throw DataError("random_free_point: maze appears to have no free space");
}

}  // namespace detail

// Play-style data: the expert walks from a random start to a random free
// waypoint, picks a fresh waypoint on arrival, and keeps going for exactly
// max_episode_steps. Gaussian action noise is added before clipping, so
// recorded actions always sit within bounds.
inline Dataset generate_dataset(const MazeSpec& spec, std::size_t n_traj, double noise_sigma,
                                std::uint64_t seed) {
  if (n_traj == 0) throw DataError("generate_dataset: n_traj must be at least 1");
  Pcg64 rng(seed, rng_stream::kDataGen);
  Dataset ds;
  ds.maze_name = spec.name;
  ds.noise_sigma = noise_sigma;
  ds.seed = seed;

  for (std::size_t ti = 0; ti < n_traj; ++ti) {
    Trajectory traj;
    traj.steps = spec.max_episode_steps;
    traj.states.reserve((traj.steps + 1) * 2);
    traj.actions.reserve(traj.steps * 2);

    double x, y, gx, gy;
    detail::random_free_point(spec, rng, x, y);
    detail::random_free_point(spec, rng, gx, gy);
    auto dist = bfs_distances(spec, spec.cell_x(gx), spec.cell_y(gy));

    float fx0 = static_cast<float>(x), fy0 = static_cast<float>(y);
    x = fx0;
    y = fy0;
    traj.states.push_back(fx0);
    traj.states.push_back(fy0);
    for (std::size_t t = 0; t < traj.steps; ++t) {
      double ax, ay;
      expert_action(spec, dist, x, y, gx, gy, ax, ay);
      ax += noise_sigma * rng.next_normal();
      ay += noise_sigma * rng.next_normal();
      double b = spec.action_bound;
      ax = std::clamp(ax, -b, b);
      ay = std::clamp(ay, -b, b);
      float fax = static_cast<float>(ax), fay = static_cast<float>(ay);
      traj.actions.push_back(fax);
      traj.actions.push_back(fay);

      // Evolve through the recorded float values so stored consecutive
      // states replay exactly under the dynamics.
      StepResult res = step(spec, x, y, fax, fay, gx, gy);
      float fx = static_cast<float>(res.x), fy = static_cast<float>(res.y);
      x = fx;
      y = fy;
      traj.states.push_back(fx);
      traj.states.push_back(fy);

      double dx = x - gx, dy = y - gy;
      if (std::sqrt(dx * dx + dy * dy) <= spec.success_radius) {
        detail::random_free_point(spec, rng, gx, gy);
        dist = bfs_distances(spec, spec.cell_x(gx), spec.cell_y(gy));
      }
    }
    ds.trajectories.push_back(std::move(traj));
  }
  return ds;
}

}  // namespace chaingoal
