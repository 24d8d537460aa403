#include "lrdb/network.hpp"

namespace lrdb {

ModuleTopology interlink_topology(int depth, int interlinks, bool transition, bool residual) {
  ModuleTopology topo;
  if (!residual) {
    topo.segments.push_back(SkipSegment{0, depth, false, false});
    return topo;
  }
  const int segments = std::min(interlinks, depth);
  for (int s = 0; s < segments; ++s) {
    SkipSegment seg;
    seg.begin = s * depth / segments;
    seg.end = (s + 1) * depth / segments;
    seg.skip = true;
    topo.segments.push_back(seg);
  }
  topo.outer_skip = interlinks > depth;
  if (transition) {
    if (topo.outer_skip) {
      topo.outer_projected = true;
      topo.segments.front().skip = false;
    } else {
      topo.segments.front().projected = true;
    }
  }
  return topo;
}

template class Network<float>;
template class Network<double>;

}  // namespace lrdb
