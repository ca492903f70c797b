# two samples, two dimensions, three timesteps
@problemName Minimal
@timeStamps false
@univariate false
@dimensions 2
@equalLength true
@seriesLength 3
@classLabel true a b
@data
1.0,2.0,3.0:4.0,5.0,6.0:a
-1.5,0.25,1e-3:7,8,9:b
