"""Object-focus dexterous manipulation: perception, planning, policy and a kinematic simulator."""
