#pragma once

#include "vop/error.hpp"
#include "vop/core_types.hpp"
#include "vop/binary_io.hpp"
#include "vop/feature_io.hpp"
#include "vop/manifest.hpp"
#include "vop/geometry.hpp"
#include "vop/encoder.hpp"
#include "vop/checkpoint_io.hpp"
#include "vop/training.hpp"
#include "vop/radius_search.hpp"
#include "vop/index.hpp"
#include "vop/records_io.hpp"
#include "vop/metrics.hpp"
#include "vop/pose_graph.hpp"
#include "vop/synthetic.hpp"
