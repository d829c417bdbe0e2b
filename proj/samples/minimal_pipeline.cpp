// Segment one synthetic scene with a random toy encoder and print the label
// histogram and pixel accuracy for the calibrated and the vanilla pipeline.

#include <cstdio>
#include <map>

#include "sccal/pipeline.hpp"
#include "sccal/toy.hpp"

int main() {
  const auto shape = sccal::toy::small_shape();
  const auto weights = sccal::toy::random_weights(shape, 7);
  const auto palette = sccal::toy::random_palette(4, 8);
  const auto text = sccal::toy::prototype_text_bank(weights, palette);
  const auto scene = sccal::toy::random_scene(40, 56, palette, 9);

  sccal::SlideOptions opt;
  opt.window = shape.image_size;
  opt.stride = shape.image_size / 2;

  for (const auto& [name, cfg] : {std::pair{"sc_clip", sccal::PipelineConfig::sc_clip()},
                                  std::pair{"vanilla", sccal::PipelineConfig::vanilla()}}) {
    sccal::SlideStats stats;
    const auto seg = sccal::segment_image(scene.image, weights, text, cfg, 48, opt, &stats);
    std::map<int, int> hist;
    int correct = 0;
    for (std::size_t i = 0; i < seg.labels.size(); ++i) {
      ++hist[seg.labels[i]];
      correct += seg.labels[i] == scene.labels.labels[i];
    }
    std::printf("%s: %dx%d, %d windows, pixel accuracy %.3f\n", name, seg.height, seg.width, stats.windows,
                static_cast<double>(correct) / seg.labels.size());
    for (const auto& [label, count] : hist) std::printf("  %s %d\n", text.names[label].c_str(), count);
  }
}
