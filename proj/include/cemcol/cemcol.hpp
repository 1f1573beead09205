#pragma once

#include "cemcol/errors.hpp"
#include "cemcol/config.hpp"
#include "cemcol/partition.hpp"
#include "cemcol/geometry.hpp"
#include "cemcol/mesh.hpp"
#include "cemcol/cem.hpp"
#include "cemcol/sparse_grid.hpp"
#include "cemcol/surrogate.hpp"
#include "cemcol/inversion.hpp"
#include "cemcol/data_io.hpp"
