// SPDX-License-Identifier: Apache-2.0
// xyz text I/O.

#include "diffpoint/geometry.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

namespace diffpoint {

PointCloud read_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  PointCloud cloud;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    float x, y, z;
    if (!(ss >> x)) continue;  // blank or comment-only line
    if (!(ss >> y >> z))
      throw FormatError("xyz line " + std::to_string(line_no) + " does not hold three numbers",
                        line_no);
    cloud.push_back({x, y, z});
  }
  return cloud;
}

void write_xyz(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  char buf[64];
  for (const Point& p : cloud) {
    std::string line;
    for (int c = 0; c < 3; ++c) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), p[c]);
      (void)ec;
      if (c) line += ' ';
      line.append(buf, end);
    }
    line += '\n';
    out << line;
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace diffpoint
