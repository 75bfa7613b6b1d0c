#include "chaingoal/maze.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "chaingoal/dataset.hpp"
#include "chaingoal/random.hpp"

using namespace chaingoal;

namespace {

MazeSpec open_room(std::size_t n, std::size_t max_steps) {
  std::vector<std::string> rows(n, std::string(n, '.'));
  return maze_from_rows("room", rows, max_steps, {});
}

}  // namespace

TEST(MazeStep, ZeroActionKeepsState) {
  auto spec = open_room(3, 10);
  auto res = step(spec, 1.5, 1.5, 0.0, 0.0, 0.3, 0.3);
  EXPECT_DOUBLE_EQ(res.x, 1.5);
  EXPECT_DOUBLE_EQ(res.y, 1.5);
  EXPECT_DOUBLE_EQ(res.reward, -1.0);
  EXPECT_FALSE(res.at_goal);
}

TEST(MazeStep, ClipsActionToBound) {
  auto spec = open_room(3, 10);
  auto res = step(spec, 1.5, 1.5, 5.0, -5.0, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(res.x, 1.75);
  EXPECT_DOUBLE_EQ(res.y, 1.25);
}

TEST(MazeStep, WallSlideCancelsBlockedAxis) {
  // Wall to the right of column 0; pushing into it moves only along y.
  auto spec = maze_from_rows("slide", {".#", ".#"}, 10, {});
  auto res = step(spec, 0.9, 0.5, 0.25, 0.25, 1.9, 1.9);
  EXPECT_DOUBLE_EQ(res.x, 0.9);
  EXPECT_DOUBLE_EQ(res.y, 0.75);
}

TEST(MazeStep, OuterBoundaryBlocks) {
  auto spec = open_room(2, 10);
  auto res = step(spec, 0.1, 0.1, -0.25, -0.25, 1.5, 1.5);
  EXPECT_DOUBLE_EQ(res.x, 0.1);
  EXPECT_DOUBLE_EQ(res.y, 0.1);
}

TEST(MazeStep, SuccessWithinRadius) {
  auto spec = open_room(3, 10);
  auto res = step(spec, 1.0, 1.0, 0.1, 0.0, 1.4, 1.0);
  // Lands at (1.1, 1.0), distance 0.3 <= 0.5.
  EXPECT_TRUE(res.at_goal);
  EXPECT_DOUBLE_EQ(res.reward, 0.0);
}

TEST(MazeStep, StateInsideWallThrows) {
  auto spec = maze_from_rows("wall", {".#"}, 10, {});
  EXPECT_THROW(step(spec, 1.5, 0.5, 0.0, 0.0, 0.0, 0.0), DataError);
}

TEST(MazeOracle, BfsCorridorDistances) {
  auto corridor = builtin_maze("corridor");
  auto dist = bfs_distances(corridor, 0, 0);
  for (std::size_t x = 0; x < corridor.width; ++x)
    EXPECT_EQ(dist[x], static_cast<int>(x));
}

TEST(MazeOracle, DpValueMatchesClosedForm) {
  auto corridor = builtin_maze("corridor");
  double gamma = 0.99;
  auto v = dp_value_oracle(corridor, 5, 0, gamma);
  EXPECT_NEAR(v[5], 0.0, 1e-9);
  EXPECT_NEAR(v[6], -1.0, 1e-9);
  EXPECT_NEAR(v[8], -(1.0 - std::pow(gamma, 3)) / (1.0 - gamma), 1e-9);  // -2.9701
  for (std::size_t x = 0; x < corridor.width; ++x) {
    int d = std::abs(static_cast<int>(x) - 5);
    EXPECT_NEAR(v[x], -(1.0 - std::pow(gamma, d)) / (1.0 - gamma), 1e-8);
  }
}

TEST(MazeOracle, DpValueSatisfiesBellman) {
  auto rooms = builtin_maze("rooms");
  double gamma = 0.99;
  auto v = dp_value_oracle(rooms, 7, 7, gamma);
  for (std::size_t y = 0; y < rooms.height; ++y)
    for (std::size_t x = 0; x < rooms.width; ++x) {
      if (rooms.wall_at(x, y)) continue;
      if (x == 7 && y == 7) {
        EXPECT_NEAR(v[y * rooms.width + x], 0.0, 1e-9);
        continue;
      }
      double best = v[y * rooms.width + x];
      const long dxs[4] = {-1, 1, 0, 0};
      const long dys[4] = {0, 0, -1, 1};
      for (int n = 0; n < 4; ++n) {
        long nx = static_cast<long>(x) + dxs[n], ny = static_cast<long>(y) + dys[n];
        if (rooms.wall_at(nx, ny)) continue;
        best = std::max(best, v[static_cast<std::size_t>(ny) * rooms.width +
                                static_cast<std::size_t>(nx)]);
      }
      EXPECT_NEAR(v[y * rooms.width + x], -1.0 + gamma * best, 1e-9);
    }
}

TEST(MazeOracle, DisconnectedCellsAtFloor) {
  auto spec = maze_from_rows("split", {"..#.."}, 10, {});
  double gamma = 0.99;
  auto v = dp_value_oracle(spec, 0, 0, gamma);
  EXPECT_NEAR(v[3], -100.0, 1e-7);
  EXPECT_NEAR(v[4], -100.0, 1e-7);
  auto dist = bfs_distances(spec, 0, 0);
  EXPECT_EQ(dist[3], -1);
  EXPECT_EQ(dist[4], -1);
}

TEST(MazeBuiltins, AllValidateAndConnect) {
  for (const char* name : {"corridor", "rooms", "long-maze"}) {
    auto spec = builtin_maze(name);
    EXPECT_EQ(spec.eval_pairs.size(), 5u) << name;
    EXPECT_NO_THROW(validate_maze(spec)) << name;
  }
  EXPECT_THROW(builtin_maze("nope"), DataError);
}

TEST(MazeBuiltins, LongMazeIsSerpentine) {
  auto spec = builtin_maze("long-maze");
  auto dist = bfs_distances(spec, 0, 14);
  // Full snake from (0,0): 8 open rows of 14 moves plus 7 two-step drops.
  EXPECT_EQ(dist[0], 126);
  EXPECT_EQ(spec.max_episode_steps, 800u);
}

TEST(MazeBuiltins, JsonRoundTrip) {
  auto spec = builtin_maze("rooms");
  auto j = maze_to_json(spec);
  auto back = maze_from_json(j);
  EXPECT_EQ(back.name, spec.name);
  EXPECT_EQ(back.wall, spec.wall);
  EXPECT_EQ(back.max_episode_steps, spec.max_episode_steps);
  ASSERT_EQ(back.eval_pairs.size(), spec.eval_pairs.size());
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(back.eval_pairs[i].sx, spec.eval_pairs[i].sx);
    EXPECT_DOUBLE_EQ(back.eval_pairs[i].gy, spec.eval_pairs[i].gy);
  }
}

TEST(MazeBuiltins, JsonRejectsUnknownKey) {
  auto j = maze_to_json(builtin_maze("corridor"));
  j["surprise"] = 1;
  EXPECT_THROW(maze_from_json(j), DataError);
}

TEST(Expert, ReachesWaypointsWithoutNoise) {
  auto rooms = builtin_maze("rooms");
  Pcg64 rng(42, 0);
  int tested = 0;
  while (tested < 20) {
    double sx, sy, gx, gy;
    detail::random_free_point(rooms, rng, sx, sy);
    detail::random_free_point(rooms, rng, gx, gy);
    auto dist = bfs_distances(rooms, rooms.cell_x(gx), rooms.cell_y(gy));
    int d = dist[static_cast<std::size_t>(rooms.cell_y(sy)) * rooms.width +
                 static_cast<std::size_t>(rooms.cell_x(sx))];
    if (d < 3) continue;
    ++tested;

    // BFS path length in env steps: d cells at cell_size/action_bound
    // steps per cell; the expert must stay within twice that.
    int budget = 2 * d * static_cast<int>(rooms.cell_size / rooms.action_bound);
    double x = sx, y = sy;
    bool reached = false;
    for (int t = 0; t < budget; ++t) {
      double ax, ay;
      expert_action(rooms, dist, x, y, gx, gy, ax, ay);
      auto res = step(rooms, x, y, ax, ay, gx, gy);
      x = res.x;
      y = res.y;
      if (res.at_goal) {
        reached = true;
        break;
      }
    }
    EXPECT_TRUE(reached) << "start (" << sx << "," << sy << ") goal (" << gx << "," << gy
                         << ") d=" << d;
  }
}

TEST(Dataset, GenerateShapesAndBounds) {
  auto spec = open_room(3, 50);
  auto ds = generate_dataset(spec, 2, 0.05, 7);
  ASSERT_EQ(ds.trajectories.size(), 2u);
  for (const auto& t : ds.trajectories) {
    EXPECT_EQ(t.steps, 50u);
    EXPECT_EQ(t.states.size(), 51u * 2);
    EXPECT_EQ(t.actions.size(), 50u * 2);
    for (float a : t.actions) EXPECT_LE(std::fabs(a), 0.25f);
    for (std::size_t i = 0; i + 1 < t.states.size(); i += 2)
      EXPECT_TRUE(spec.free_at(t.states[i], t.states[i + 1]));
  }
  EXPECT_EQ(ds.total_transitions(), 100u);
}

TEST(Dataset, StatesReplayUnderDynamics) {
  auto spec = builtin_maze("rooms");
  auto ds = generate_dataset(spec, 3, 0.05, 11);
  for (const auto& t : ds.trajectories) {
    for (std::size_t i = 0; i < t.steps; ++i) {
      auto res = step(spec, t.states[2 * i], t.states[2 * i + 1], t.actions[2 * i],
                      t.actions[2 * i + 1], -100.0, -100.0);
      EXPECT_NEAR(res.x, t.states[2 * (i + 1)], 1e-6);
      EXPECT_NEAR(res.y, t.states[2 * (i + 1) + 1], 1e-6);
    }
  }
}

TEST(Dataset, GenerationIsDeterministic) {
  auto spec = builtin_maze("corridor");
  auto a = serialize_dataset(generate_dataset(spec, 3, 0.05, 123));
  auto b = serialize_dataset(generate_dataset(spec, 3, 0.05, 123));
  auto c = serialize_dataset(generate_dataset(spec, 3, 0.05, 124));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Dataset, RoundTripIsByteIdentical) {
  auto spec = open_room(4, 30);
  Pcg64 seed_rng(99, 0);
  for (int trial = 0; trial < 10; ++trial) {
    auto ds = generate_dataset(spec, 1 + trial % 3, 0.1, seed_rng.next_u64());
    auto bytes = serialize_dataset(ds);
    auto parsed = parse_dataset(bytes);
    EXPECT_EQ(serialize_dataset(parsed), bytes);
  }
}

TEST(Dataset, FileSizeMatchesFormula) {
  auto spec = open_room(3, 20);
  auto ds = generate_dataset(spec, 5, 0.0, 1);
  auto bytes = serialize_dataset(ds);
  std::size_t expect = 4 + 4 * 4;  // magic + version/obs/act/n_traj
  for (const auto& t : ds.trajectories)
    expect += 4 + ((t.steps + 1) * 2 + t.steps * 2) * 4;
  EXPECT_EQ(bytes.size(), expect);
}

TEST(Dataset, SaveLoadWithSidecar) {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "chaingoal_ds_test";
  fs::create_directories(dir);
  auto path = (dir / "d.bin").string();

  auto spec = builtin_maze("corridor");
  auto ds = generate_dataset(spec, 2, 0.05, 31);
  save_dataset(ds, path);
  auto back = load_dataset(path);
  EXPECT_EQ(serialize_dataset(back), serialize_dataset(ds));
  EXPECT_EQ(back.maze_name, "corridor");
  EXPECT_DOUBLE_EQ(back.noise_sigma, 0.05);
  EXPECT_EQ(back.seed, 31u);
  fs::remove_all(dir);
}

TEST(Dataset, CorruptFilesRejectedWithOffset) {
  auto spec = open_room(3, 10);
  auto bytes = serialize_dataset(generate_dataset(spec, 1, 0.0, 5));

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_dataset(bad_magic), DataError);

  auto truncated = bytes.substr(0, bytes.size() - 3);
  try {
    parse_dataset(truncated);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }

  auto trailing = bytes + "zz";
  EXPECT_THROW(parse_dataset(trailing), DataError);

  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(parse_dataset(bad_version), DataError);
}
