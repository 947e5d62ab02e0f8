#pragma once

// Everything in one include.

#include "sps/errors.hpp"
#include "sps/geometry.hpp"
#include "sps/image.hpp"
#include "sps/io.hpp"
#include "sps/slic.hpp"
#include "sps/scene_graph.hpp"
#include "sps/local_sfm.hpp"
#include "sps/trws.hpp"
#include "sps/energy.hpp"
#include "sps/scale_solver.hpp"
#include "sps/refine.hpp"
#include "sps/evaluate.hpp"
#include "sps/synth.hpp"
#include "sps/pipeline.hpp"
