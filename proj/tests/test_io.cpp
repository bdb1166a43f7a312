#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "pulsekoop/io.hpp"

namespace pulsekoop::io {
namespace {

TEST(Io, DoublesRoundTrip) {
  for (double v : {0.0, -0.0, 1.0 / 3.0, 3.53, 1e-300, -2.5e17, 0.1 + 0.2}) EXPECT_EQ(parse_double(format_double(v)), v);
  EXPECT_EQ(format_double(INFINITY), "inf");
  EXPECT_EQ(format_double(-INFINITY), "-inf");
  EXPECT_EQ(format_double(NAN), "nan");
  EXPECT_TRUE(std::isinf(parse_double("-inf")));
  EXPECT_TRUE(std::isnan(parse_double("nan")));
  EXPECT_THROW(parse_double("1.5x"), Error);
  EXPECT_THROW(parse_double(""), Error);
}

TEST(Io, CsvRoundTrip) {
  Table t;
  t.comments = {" {\"tool\":\"x\"}", " second"};
  t.columns = {"mu", "tau", "r"};
  t.rows = {{1.0, 2.0, -INFINITY}, {0.1, 1.0 / 7.0, 5e-12}};
  std::istringstream in(to_csv(t));
  const auto back = parse_csv(in);
  EXPECT_EQ(back.comments, t.comments);
  EXPECT_EQ(back.columns, t.columns);
  ASSERT_EQ(back.rows.size(), 2u);
  EXPECT_EQ(back.rows[1], t.rows[1]);
  EXPECT_TRUE(std::isinf(back.rows[0][2]));
  EXPECT_EQ(back.column("tau"), 1u);
  EXPECT_THROW(back.column("gamma"), Error);
}

TEST(Io, RaggedRowsRejected) {
  std::istringstream in("a,b\n1,2\n3\n");
  EXPECT_THROW(parse_csv(in), Error);
  Table t;
  t.columns = {"a"};
  t.rows = {{1.0, 2.0}};
  EXPECT_THROW(to_csv(t), Error);
}

TEST(Io, AtomicWriteReplacesFile) {
  const auto dir = std::filesystem::temp_directory_path() / "pulsekoop_io_test";
  std::filesystem::remove_all(dir);
  const auto path = dir / "sub" / "out.csv";
  write_atomic(path, "first\n");
  write_atomic(path, "second\n");
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  EXPECT_EQ(ss.str(), "second\n");
  EXPECT_FALSE(std::filesystem::exists(dir / "sub" / "out.csv.tmp"));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace pulsekoop::io
