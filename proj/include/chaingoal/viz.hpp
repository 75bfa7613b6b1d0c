#pragma once

#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "chaingoal/maze.hpp"
#include "chaingoal/mlp.hpp"
#include "chaingoal/policy.hpp"
#include "chaingoal/tensor.hpp"
#include "chaingoal/trainer.hpp"
#include "chaingoal/value.hpp"

namespace chaingoal {

// One mean-mode evaluation episode with every step's decoded subgoals kept
// for export. agent_x/y hold the position the action was chosen from, so row
// count equals the number of executed steps.
struct EpisodeTrace {
  double goal_x = 0, goal_y = 0;
  std::vector<double> agent_x, agent_y;
  std::vector<std::vector<std::pair<double, double>>> subgoals;  // per step, index i-1 = subgoal i
  bool success = false;
};

template <typename F>
EpisodeTrace trace_episode(const Policy<F>& policy, const ValueFunction<F>& vf,
                           const Mlp<F>& decoder, const MazeSpec& spec, const EvalPair& pair) {
  EpisodeTrace trace;
  trace.goal_x = pair.gx;
  trace.goal_y = pair.gy;
  auto g = Tensor<F>::from_vector({1, 2}, {static_cast<F>(pair.gx), static_cast<F>(pair.gy)});
  auto e_g = vf.embed_goal(g);
  std::size_t h_count = policy.config.horizon;
  double x = pair.sx, y = pair.sy;
  for (std::size_t t = 0; t < spec.max_episode_steps; ++t) {
    auto gen = policy.generate({static_cast<F>(x), static_cast<F>(y)}, e_g,
                               /*sample=*/false, spec.action_bound);
    trace.agent_x.push_back(x);
    trace.agent_y.push_back(y);
    std::vector<std::pair<double, double>> decoded;
    for (std::size_t i = 0; i < h_count; ++i) {
      auto h = Tensor<F>::from_vector({1, policy.config.embed_dim}, gen.hidden[i]);
      auto xy = decoder.forward(h);
      decoded.emplace_back(xy.data()[0], xy.data()[1]);
    }
    trace.subgoals.push_back(std::move(decoded));
    StepResult res = step(spec, x, y, gen.action[0], gen.action[1], pair.gx, pair.gy);
    x = res.x;
    y = res.y;
    if (res.at_goal) {
      trace.success = true;
      break;
    }
  }
  return trace;
}

inline std::string episode_csv(const EpisodeTrace& trace, std::size_t horizon) {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  std::string out = "step,agent_x,agent_y,goal_x,goal_y";
  for (std::size_t i = 1; i <= horizon; ++i)
    out += ",subgoal_" + std::to_string(i) + "_x,subgoal_" + std::to_string(i) + "_y";
  out += "\n";
  for (std::size_t t = 0; t < trace.agent_x.size(); ++t) {
    out += std::to_string(t) + "," + fmt(trace.agent_x[t]) + "," + fmt(trace.agent_y[t]) + "," +
           fmt(trace.goal_x) + "," + fmt(trace.goal_y);
    for (std::size_t i = 0; i < horizon; ++i)
      out += "," + fmt(trace.subgoals[t][i].first) + "," + fmt(trace.subgoals[t][i].second);
    out += "\n";
  }
  return out;
}

namespace detail {

// Nearest subgoal (i = 1) in blue through farthest in red.
inline std::string subgoal_color(std::size_t i, std::size_t horizon) {
  double f = horizon > 1 ? static_cast<double>(i - 1) / static_cast<double>(horizon - 1) : 0.0;
  int r = static_cast<int>(31 + f * (214 - 31));
  int g = static_cast<int>(119 + f * (39 - 119));
  int b = static_cast<int>(180 + f * (40 - 180));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace detail

// Maze walls, the agent path, start/goal markers and the per-step decoded
// subgoal dots on one SVG canvas. World coordinates scale at 24 px per cell.
inline std::string episode_svg(const EpisodeTrace& trace, const MazeSpec& spec,
                               std::size_t horizon) {
  const double s = 24.0;
  double w = static_cast<double>(spec.width) * spec.cell_size * s;
  double h = static_cast<double>(spec.height) * spec.cell_size * s;
  auto px = [&](double wx) { return wx * s; };
  // SVG y grows downward; flip so the maze reads like the row layout.
  auto py = [&](double wy) { return h - wy * s; };
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
  };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(w) +
                    "\" height=\"" + fmt(h) + "\" viewBox=\"0 0 " + fmt(w) + " " + fmt(h) +
                    "\">\n";
  svg += "<rect width=\"" + fmt(w) + "\" height=\"" + fmt(h) + "\" fill=\"#f8f8f5\"/>\n";
  for (std::size_t cy = 0; cy < spec.height; ++cy)
    for (std::size_t cx = 0; cx < spec.width; ++cx)
      if (spec.wall[cy * spec.width + cx]) {
        double side = spec.cell_size * s;
        svg += "<rect x=\"" + fmt(static_cast<double>(cx) * side) + "\" y=\"" +
               fmt(h - static_cast<double>(cy + 1) * side) + "\" width=\"" + fmt(side) +
               "\" height=\"" + fmt(side) + "\" fill=\"#3a3a3a\"/>\n";
      }

  for (std::size_t t = 0; t < trace.subgoals.size(); ++t)
    for (std::size_t i = 0; i < trace.subgoals[t].size(); ++i)
      svg += "<circle cx=\"" + fmt(px(trace.subgoals[t][i].first)) + "\" cy=\"" +
             fmt(py(trace.subgoals[t][i].second)) + "\" r=\"2.5\" fill=\"" +
             detail::subgoal_color(i + 1, horizon) + "\" fill-opacity=\"0.45\"/>\n";

  if (!trace.agent_x.empty()) {
    std::string pts;
    for (std::size_t t = 0; t < trace.agent_x.size(); ++t)
      pts += fmt(px(trace.agent_x[t])) + "," + fmt(py(trace.agent_y[t])) + " ";
    svg += "<polyline points=\"" + pts +
           "\" fill=\"none\" stroke=\"#111111\" stroke-width=\"1.5\"/>\n";
    svg += "<circle cx=\"" + fmt(px(trace.agent_x[0])) + "\" cy=\"" + fmt(py(trace.agent_y[0])) +
           "\" r=\"5\" fill=\"#2ca02c\"/>\n";
  }
  svg += "<circle cx=\"" + fmt(px(trace.goal_x)) + "\" cy=\"" + fmt(py(trace.goal_y)) +
         "\" r=\"" + fmt(spec.success_radius * s) +
         "\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\"/>\n";
  svg += "<circle cx=\"" + fmt(px(trace.goal_x)) + "\" cy=\"" + fmt(py(trace.goal_y)) +
         "\" r=\"4\" fill=\"#d62728\"/>\n";
  svg += "</svg>\n";
  return svg;
}

}  // namespace chaingoal
