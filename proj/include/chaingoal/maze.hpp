#pragma once

// 2-D point mazes on a unit-cell grid. The agent is a point with position
// (x, y), actions are per-axis deltas clipped to action_bound, and walls
// block movement axis-separably (the blocked axis component is cancelled,
// the free axis still moves). Rewards follow the sparse goal convention:
// 0 within success_radius of the goal, -1 otherwise.

#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include <json.hpp>

#include "chaingoal/common.hpp"

namespace chaingoal {

struct EvalPair {
  double sx, sy, gx, gy;
};

struct MazeSpec {
  std::string name;
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> wall;  // row-major, wall[y*width + x]
  double cell_size = 1.0;
  double action_bound = 0.25;
  double success_radius = 0.5;
  std::size_t max_episode_steps = 0;
  std::vector<EvalPair> eval_pairs;

  std::size_t cell_count() const { return width * height; }

  bool wall_at(long cx, long cy) const {
    if (cx < 0 || cy < 0 || cx >= static_cast<long>(width) || cy >= static_cast<long>(height))
      return true;
    return wall[static_cast<std::size_t>(cy) * width + static_cast<std::size_t>(cx)] != 0;
  }

  long cell_x(double x) const { return static_cast<long>(std::floor(x / cell_size)); }
  long cell_y(double y) const { return static_cast<long>(std::floor(y / cell_size)); }

  bool free_at(double x, double y) const { return !wall_at(cell_x(x), cell_y(y)); }

  double cell_center_x(long cx) const { return (static_cast<double>(cx) + 0.5) * cell_size; }
  double cell_center_y(long cy) const { return (static_cast<double>(cy) + 0.5) * cell_size; }
};

struct StepResult {
  double x, y;
  double reward;
  bool at_goal;
};

// Axis-separable slide: try the x move against the current y, then the y
// move against the updated x. Each component lands only if its target cell
// is free.
inline StepResult step(const MazeSpec& spec, double x, double y, double ax, double ay,
                       double gx, double gy) {
  if (!spec.free_at(x, y))
    throw DataError("step: state (" + std::to_string(x) + ", " + std::to_string(y) +
                    ") is inside a wall");
  double b = spec.action_bound;
  ax = std::clamp(ax, -b, b);
  ay = std::clamp(ay, -b, b);
  double nx = x + ax;
  if (!spec.free_at(nx, y)) nx = x;
  double ny = y + ay;
  if (!spec.free_at(nx, ny)) ny = y;
  double dx = nx - gx, dy = ny - gy;
  bool at_goal = std::sqrt(dx * dx + dy * dy) <= spec.success_radius;
  return {nx, ny, at_goal ? 0.0 : -1.0, at_goal};
}

// Shortest-path cell distances from (gx, gy) by breadth-first search over
// the 4-neighborhood; unreachable cells get -1.
inline std::vector<int> bfs_distances(const MazeSpec& spec, long gx, long gy) {
  if (spec.wall_at(gx, gy)) throw DataError("bfs_distances: goal cell is a wall");
  std::vector<int> dist(spec.cell_count(), -1);
  std::deque<std::pair<long, long>> frontier;
  dist[static_cast<std::size_t>(gy) * spec.width + static_cast<std::size_t>(gx)] = 0;
  frontier.emplace_back(gx, gy);
  const long dxs[4] = {-1, 1, 0, 0};
  const long dys[4] = {0, 0, -1, 1};
  while (!frontier.empty()) {
    auto [cx, cy] = frontier.front();
    frontier.pop_front();
    int d = dist[static_cast<std::size_t>(cy) * spec.width + static_cast<std::size_t>(cx)];
    for (int n = 0; n < 4; ++n) {
      long nx = cx + dxs[n], ny = cy + dys[n];
      if (spec.wall_at(nx, ny)) continue;
      auto idx = static_cast<std::size_t>(ny) * spec.width + static_cast<std::size_t>(nx);
      if (dist[idx] < 0) {
        dist[idx] = d + 1;
        frontier.emplace_back(nx, ny);
      }
    }
  }
  return dist;
}

// Value iteration on the cell graph with reward 0 at the (absorbing) goal
// and -1 per step elsewhere, run to a 1e-10 fixed point. On shortest-path
// dynamics the result is -(1 - gamma^d)/(1 - gamma); unreachable cells sit
// at the -1/(1-gamma) floor. Walls are reported at that floor as well.
inline std::vector<double> dp_value_oracle(const MazeSpec& spec, long gx, long gy, double gamma) {
  if (spec.wall_at(gx, gy)) throw DataError("dp_value_oracle: goal cell is a wall");
  std::size_t n = spec.cell_count();
  double floor_v = -1.0 / (1.0 - gamma);
  std::vector<double> v(n, 0.0), next(n, 0.0);
  std::size_t goal_idx = static_cast<std::size_t>(gy) * spec.width + static_cast<std::size_t>(gx);
  const long dxs[4] = {-1, 1, 0, 0};
  const long dys[4] = {0, 0, -1, 1};
  for (int iter = 0; iter < 100000; ++iter) {
    double delta = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      long cx = static_cast<long>(i % spec.width), cy = static_cast<long>(i / spec.width);
      if (spec.wall_at(cx, cy)) {
        next[i] = floor_v;
      } else if (i == goal_idx) {
        next[i] = 0.0;
      } else {
        double best = v[i];  // staying put is always available
        for (int m = 0; m < 4; ++m) {
          long nx = cx + dxs[m], ny = cy + dys[m];
          if (spec.wall_at(nx, ny)) continue;
          best = std::max(best, v[static_cast<std::size_t>(ny) * spec.width +
                                  static_cast<std::size_t>(nx)]);
        }
        next[i] = -1.0 + gamma * best;
        if (next[i] < floor_v) next[i] = floor_v;
      }
      delta = std::max(delta, std::fabs(next[i] - v[i]));
    }
    v.swap(next);
    if (delta < 1e-10) return v;
  }
  throw NumericError("dp_value_oracle: value iteration failed to reach the fixed point");
}

// ===== built-in mazes and JSON I/O =====

// Building block for the built-ins, custom files, and tests.
inline MazeSpec maze_from_rows(std::string name, const std::vector<std::string>& rows,
                               std::size_t max_steps, std::vector<EvalPair> pairs) {
  MazeSpec spec;
  spec.name = std::move(name);
  spec.height = rows.size();
  spec.width = rows.empty() ? 0 : rows[0].size();
  if (spec.width == 0 || spec.height == 0) throw DataError("maze grid is empty");
  spec.wall.assign(spec.width * spec.height, 0);
  for (std::size_t y = 0; y < spec.height; ++y) {
    if (rows[y].size() != spec.width)
      throw DataError("maze grid row " + std::to_string(y) + " has width " +
                      std::to_string(rows[y].size()) + ", expected " +
                      std::to_string(spec.width));
    for (std::size_t x = 0; x < spec.width; ++x) {
      char c = rows[y][x];
      if (c == '#')
        spec.wall[y * spec.width + x] = 1;
      else if (c != '.')
        throw DataError(std::string("maze grid contains '") + c + "', expected '.' or '#'");
    }
  }
  spec.max_episode_steps = max_steps;
  spec.eval_pairs = std::move(pairs);
  return spec;
}

inline void validate_maze(const MazeSpec& spec) {
  if (spec.eval_pairs.size() != 5)
    throw DataError("maze \"" + spec.name + "\" has " + std::to_string(spec.eval_pairs.size()) +
                    " eval pairs, expected exactly 5");
  if (spec.max_episode_steps == 0)
    throw DataError("maze \"" + spec.name + "\" has max_episode_steps 0");
  for (std::size_t i = 0; i < spec.eval_pairs.size(); ++i) {
    const EvalPair& p = spec.eval_pairs[i];
    if (!spec.free_at(p.sx, p.sy) || !spec.free_at(p.gx, p.gy))
      throw DataError("maze \"" + spec.name + "\" eval pair " + std::to_string(i) +
                      " touches a wall cell");
    auto dist = bfs_distances(spec, spec.cell_x(p.gx), spec.cell_y(p.gy));
    long sx = spec.cell_x(p.sx), sy = spec.cell_y(p.sy);
    if (dist[static_cast<std::size_t>(sy) * spec.width + static_cast<std::size_t>(sx)] < 0)
      throw DataError("maze \"" + spec.name + "\" eval pair " + std::to_string(i) +
                      " is not connected");
  }
}

inline MazeSpec builtin_maze(const std::string& name) {
  if (name == "corridor") {
    auto spec = maze_from_rows(
        "corridor", {std::string(31, '.')}, 200,
        {{2.5, 0.5, 26.5, 0.5},
         {28.5, 0.5, 4.5, 0.5},
         {5.5, 0.5, 22.5, 0.5},
         {25.5, 0.5, 10.5, 0.5},
         {9.5, 0.5, 19.5, 0.5}});
    validate_maze(spec);
    return spec;
  }
  if (name == "rooms") {
    auto spec = maze_from_rows("rooms",
                                       {
                                           "....#....",
                                           ".........",
                                           "....#....",
                                           "....#....",
                                           "##.###.##",
                                           "....#....",
                                           "....#....",
                                           ".........",
                                           "....#....",
                                       },
                                       400,
                                       {{1.5, 1.5, 7.5, 7.5},
                                        {7.5, 1.5, 1.5, 7.5},
                                        {1.5, 7.5, 7.5, 1.5},
                                        {2.5, 2.5, 6.5, 6.5},
                                        {7.5, 7.5, 1.5, 1.5}});
    validate_maze(spec);
    return spec;
  }
  if (name == "long-maze") {
    // Serpentine: even rows are open, odd rows have a single opening that
    // alternates between the right and left end.
    std::vector<std::string> rows;
    for (std::size_t y = 0; y < 15; ++y) {
      if (y % 2 == 0) {
        rows.emplace_back(15, '.');
      } else {
        std::string r(15, '#');
        r[(y % 4 == 1) ? 14 : 0] = '.';
        rows.push_back(std::move(r));
      }
    }
    auto spec = maze_from_rows("long-maze", rows, 800,
                                       {{0.5, 0.5, 0.5, 14.5},
                                        {0.5, 14.5, 0.5, 0.5},
                                        {14.5, 0.5, 0.5, 14.5},
                                        {0.5, 2.5, 14.5, 10.5},
                                        {7.5, 0.5, 7.5, 6.5}});
    validate_maze(spec);
    return spec;
  }
  throw DataError("unknown built-in maze \"" + name +
                  "\" (available: corridor, rooms, long-maze)");
}

inline MazeSpec maze_from_json(const nlohmann::json& j) {
  for (const auto& [key, val] : j.items()) {
    (void)val;
    if (key != "name" && key != "grid" && key != "max_episode_steps" && key != "eval_pairs" &&
        key != "cell_size" && key != "action_bound" && key != "success_radius")
      throw DataError("maze JSON has unknown key \"" + key + "\"");
  }
  std::vector<std::string> rows = j.at("grid").get<std::vector<std::string>>();
  std::vector<EvalPair> pairs;
  for (const auto& p : j.at("eval_pairs")) {
    if (!p.is_array() || p.size() != 4)
      throw DataError("maze JSON eval_pairs entries must be [sx, sy, gx, gy]");
    pairs.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>(),
                     p[3].get<double>()});
  }
  auto spec = maze_from_rows(j.value("name", std::string("custom")), rows,
                                     j.at("max_episode_steps").get<std::size_t>(),
                                     std::move(pairs));
  spec.cell_size = j.value("cell_size", 1.0);
  spec.action_bound = j.value("action_bound", 0.25);
  spec.success_radius = j.value("success_radius", 0.5);
  validate_maze(spec);
  return spec;
}

inline nlohmann::json maze_to_json(const MazeSpec& spec) {
  nlohmann::json j;
  j["name"] = spec.name;
  std::vector<std::string> rows;
  for (std::size_t y = 0; y < spec.height; ++y) {
    std::string r;
    for (std::size_t x = 0; x < spec.width; ++x)
      r += spec.wall[y * spec.width + x] ? '#' : '.';
    rows.push_back(std::move(r));
  }
  j["grid"] = rows;
  j["max_episode_steps"] = spec.max_episode_steps;
  j["cell_size"] = spec.cell_size;
  j["action_bound"] = spec.action_bound;
  j["success_radius"] = spec.success_radius;
  auto pairs = nlohmann::json::array();
  for (const auto& p : spec.eval_pairs) pairs.push_back({p.sx, p.sy, p.gx, p.gy});
  j["eval_pairs"] = pairs;
  return j;
}

}  // namespace chaingoal
