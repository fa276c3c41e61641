#include <doctest.h>

#include "synthetic.hpp"

#include <lsc/render.hpp>

#include <fstream>
#include <iterator>

using namespace lsc;

namespace {

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

}  // namespace

TEST_CASE("triplet rendering") {
  Matrix x(4, 4);
  x << 0, 1, 5, -2,  //
      1, 1, 5, 0,    //
      2, 1, 5, 2,    //
      4, 1, 5, 6;
  const EigenField f({2, 2}, x);

  SUBCASE("per-channel min-max") {
    const auto rgb = render_triplet(f, {0, 3, 0});
    REQUIRE(rgb.size() == 12);
    CHECK(rgb[0] == 0);
    CHECK(rgb[3] == 64);   // 1/4 * 255 = 63.75
    CHECK(rgb[6] == 128);  // 2/4
    CHECK(rgb[9] == 255);
    CHECK(rgb[1] == 0);
    CHECK(rgb[10] == 255);
    CHECK(rgb[2] == rgb[0]);
  }
  SUBCASE("constant channels render mid gray") {
    const auto rgb = render_triplet(f, {1, 2, 1});
    for (auto v : rgb) CHECK(v == 128);
  }
  SUBCASE("invariant to per-channel affine maps with positive scale") {
    EigenField g = f;
    g.values.col(0) = g.values.col(0) * 3.0 + Vector::Constant(4, -11.0);
    CHECK(render_triplet(g, {0, 3, 0}) == render_triplet(f, {0, 3, 0}));
  }
  SUBCASE("png output") {
    const auto path = testing::scratch_dir("render") / "t.png";
    write_triplet_png(f, {0, 1, 3}, path);
    std::ifstream in(path, std::ios::binary);
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    REQUIRE(bytes.size() > 33);
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    CHECK(std::equal(sig, sig + 8, bytes.begin()));
    CHECK(be32(bytes, 16) == 2);  // width
    CHECK(be32(bytes, 20) == 2);  // height
    CHECK(bytes[24] == 8);        // bit depth
    CHECK(bytes[25] == 2);        // truecolor
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(render_triplet(f, {0, 1, 4}), InputError);
    CHECK_THROWS_AS(render_triplet(f, {-1, 1, 2}), InputError);
    CHECK_THROWS_AS(render_triplet(EigenField({3, 3}, x), {0, 1, 2}), InputError);
  }
}
